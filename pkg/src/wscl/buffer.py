"""Fixed-capacity replay memory with reservoir insertion, uniform sampling,
and a kNN classifier over stored items' embeddings."""

from __future__ import annotations

import warnings

import numpy as np

from . import data as data_io
from .exceptions import ConfigurationError


class ReservoirBuffer:
    """Reservoir-sampled memory: after n insertion attempts into capacity m,
    every offered item is resident with probability min(1, m/n)."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ConfigurationError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.n_seen = 0
        self._x = []
        self._y = []
        self._task = []

    def __len__(self):
        return len(self._x)

    def try_insert(self, features, label, task_id, rng):
        """Offer one (pseudo-)labeled item; returns whether it was stored."""
        if label is None:
            raise ConfigurationError("buffer items must carry a label")
        self.n_seen += 1
        if len(self._x) < self.capacity:
            self._x.append(np.array(features, copy=True))
            self._y.append(int(label))
            self._task.append(int(task_id))
            return True
        slot = rng.integers(0, self.n_seen)
        if slot < self.capacity:
            self._x[slot] = np.array(features, copy=True)
            self._y[slot] = int(label)
            self._task[slot] = int(task_id)
            return True
        return False

    def as_arrays(self):
        """(features, labels, task_ids) copies of the current contents."""
        if not self._x:
            return np.zeros((0,)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        return (
            np.stack(self._x),
            np.array(self._y, dtype=int),
            np.array(self._task, dtype=int),
        )

    def sample(self, k, rng):
        """Uniform sample of k items: without replacement when k <= size,
        with replacement otherwise. Empty buffer or k = 0 gives empty arrays."""
        n = len(self._x)
        if n == 0 or k == 0:
            return np.zeros((0,)), np.zeros(0, dtype=int)
        if k <= n:
            idx = rng.choice(n, size=k, replace=False)
        else:
            idx = rng.integers(0, n, size=k)
        x, y, _ = self.as_arrays()
        return x[idx], y[idx]

    def save(self, path):
        """Persist to the dataset container format plus a task_id column."""
        x, y, task = self.as_arrays()
        data_io.save_examples_bin(path, x, y, extra_int=task)

    @classmethod
    def load(cls, path, capacity=None):
        x, y, task, _ = data_io.load_examples_bin(path, has_extra_int=True)
        buf = cls(capacity or max(1, len(x)))
        for i in range(len(x)):
            buf._x.append(x[i])
            buf._y.append(int(y[i]))
            buf._task.append(int(task[i]))
        buf.n_seen = len(x)
        return buf


def knn_fit_and_predict(buf, net, queries, k):
    """Majority label among the k stored items nearest in embedding space.

    Distances are Euclidean between the network's embedding outputs. Ties are
    broken by smallest summed distance, then lowest class id. ``k`` larger
    than the buffer is clamped with a warning.
    """
    if len(buf) == 0:
        raise ConfigurationError("kNN over an empty buffer")
    if k > len(buf):
        warnings.warn(f"kNN k={k} clamped to buffer size {len(buf)}")
        k = len(buf)
    x, y, _ = buf.as_arrays()
    _, ref_emb = net.forward(x)
    _, query_emb = net.forward(np.asarray(queries))
    preds = np.empty(len(query_emb), dtype=int)
    for i, q in enumerate(query_emb):
        dist = ((ref_emb - q) ** 2).sum(axis=1)
        nearest = np.argsort(dist, kind="stable")[:k]
        labels = y[nearest]
        counts = np.bincount(labels)
        best = counts.max()
        candidates = np.flatnonzero(counts == best)
        if len(candidates) == 1:
            preds[i] = candidates[0]
            continue
        sums = {c: dist[nearest[labels == c]].sum() for c in candidates}
        low = min(sums.values())
        preds[i] = min(c for c in candidates if sums[c] == low)
    return preds
