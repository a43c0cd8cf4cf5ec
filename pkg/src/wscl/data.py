"""Task streams: class-disjoint task splits, labeled/unlabeled partitions,
stochastic augmentation, batch emission, and the dataset container format.

A :class:`TaskStream` hands learners :class:`Batch` objects that carry labels
only for the labeled partition; ground-truth classes of unlabeled examples
stay inside the stream and are reachable only through the guarded
:meth:`TaskStream.hidden_train_labels` accessor used by evaluation tooling.
"""

from __future__ import annotations

import contextlib
import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, UsageError


@dataclass
class Example:
    """One stream item. ``class_true`` is evaluation-only for unlabeled items."""

    features: np.ndarray
    label: int | None
    class_true: int
    task_id: int


@dataclass
class Batch:
    """Mixed labeled/unlabeled minibatch as seen by learners."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray

    @property
    def size(self):
        return len(self.x_labeled) + len(self.x_unlabeled)

    @property
    def empty(self):
        return self.size == 0


@dataclass
class Dataset:
    """In-memory dataset with a train/test partition."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int


@dataclass
class _Task:
    classes: list
    train_x: np.ndarray
    _train_y: np.ndarray          # hidden; label visibility goes via labeled_mask
    labeled_mask: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    val_x: np.ndarray | None = None
    val_y: np.ndarray | None = None


# Guard for the evaluation-only label accessor; tests flip this to verify
# that no learner code path touches hidden labels.
_HIDDEN_LABEL_GUARD = {"forbidden": False, "reads": 0}


@contextlib.contextmanager
def forbid_hidden_labels():
    """Context in which reading hidden (unlabeled) ground truth raises."""
    _HIDDEN_LABEL_GUARD["forbidden"] = True
    try:
        yield _HIDDEN_LABEL_GUARD
    finally:
        _HIDDEN_LABEL_GUARD["forbidden"] = False


class TaskStream:
    """Ordered sequence of class-disjoint tasks with a fixed labeled rate."""

    def __init__(self, tasks, p_s, batch_size=32, epochs_per_task=10):
        self.tasks = tasks
        self.p_s = p_s
        self.batch_size = batch_size
        self.epochs_per_task = epochs_per_task
        seen = set()
        for task in tasks:
            overlap = seen.intersection(task.classes)
            if overlap:
                raise ConfigurationError(f"classes {overlap} appear in two tasks")
            seen.update(task.classes)

    @property
    def num_tasks(self):
        return len(self.tasks)

    @property
    def num_classes(self):
        return sum(len(t.classes) for t in self.tasks)

    def classes_of(self, t):
        return list(self.tasks[t].classes)

    def seen_classes(self, t):
        out = []
        for task in self.tasks[:t + 1]:
            out.extend(task.classes)
        return out

    def labeled_count(self, t):
        return int(self.tasks[t].labeled_mask.sum())

    def epoch_batches(self, t, rng):
        """Yield one epoch of batches for task ``t``, shuffled, no replacement."""
        task = self.tasks[t]
        n = len(task.train_x)
        order = rng.permutation(n)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            labeled = idx[task.labeled_mask[idx]]
            unlabeled = idx[~task.labeled_mask[idx]]
            yield Batch(
                x_labeled=task.train_x[labeled],
                y_labeled=task._train_y[labeled].copy(),
                x_unlabeled=task.train_x[unlabeled],
            )

    def hidden_train_labels(self, t):
        """Ground truth of *all* train items of task ``t`` (evaluation only)."""
        if _HIDDEN_LABEL_GUARD["forbidden"]:
            raise UsageError("hidden ground-truth labels accessed during training")
        _HIDDEN_LABEL_GUARD["reads"] += 1
        return self.tasks[t]._train_y.copy()

    def test_set(self, t):
        task = self.tasks[t]
        return task.test_x, task.test_y.copy()

    def validation_set(self, t):
        task = self.tasks[t]
        if task.val_x is None:
            raise ConfigurationError("stream was built without a validation split")
        return task.val_x, task.val_y.copy()


def labeled_count_for_class(n_c, p_s):
    """floor(p_s * n_c), the per-class labeled quota."""
    return int(math.floor(p_s * n_c))


def build_split(dataset, num_tasks, p_s, seed, batch_size=32, epochs_per_task=10,
                val_fraction=0.0):
    """Partition a dataset into ``num_tasks`` class-disjoint tasks at rate ``p_s``.

    Per class c with n_c train examples, exactly floor(p_s * n_c) are labeled,
    chosen uniformly at random; the rest flow through the stream unlabeled.
    Both partitions keep the original class balance. ``val_fraction`` carves a
    class-balanced validation subset out of the train split first.
    """
    if not (0.0 < p_s <= 1.0):
        raise ConfigurationError(f"labeled fraction must be in (0, 1], got {p_s}")
    classes = sorted(np.unique(dataset.train_y).tolist())
    if len(classes) % num_tasks != 0:
        raise ConfigurationError(
            f"{len(classes)} classes not divisible into {num_tasks} tasks"
        )
    rng = np.random.default_rng(seed)
    per_task = len(classes) // num_tasks

    tasks = []
    for t in range(num_tasks):
        task_classes = classes[t * per_task:(t + 1) * per_task]
        tr_idx, va_idx, lab_local = [], [], []
        for c in task_classes:
            c_idx = np.flatnonzero(dataset.train_y == c)
            c_idx = c_idx[rng.permutation(len(c_idx))]
            n_val = int(math.floor(val_fraction * len(c_idx)))
            va_idx.append(c_idx[:n_val])
            keep = c_idx[n_val:]
            n_lab = labeled_count_for_class(len(keep), p_s)
            if n_lab == 0:
                raise ConfigurationError(
                    f"p_s={p_s} leaves class {c} with zero labeled examples"
                )
            base = sum(len(a) for a in tr_idx)
            tr_idx.append(keep)
            lab_local.append(np.arange(base, base + n_lab))
        tr_idx = np.concatenate(tr_idx)
        mask = np.zeros(len(tr_idx), dtype=bool)
        mask[np.concatenate(lab_local)] = True
        # shuffle within the task so labeled items are interleaved on the stream
        perm = rng.permutation(len(tr_idx))
        tr_idx, mask = tr_idx[perm], mask[perm]

        te_mask = np.isin(dataset.test_y, task_classes)
        task = _Task(
            classes=list(task_classes),
            train_x=dataset.train_x[tr_idx],
            _train_y=dataset.train_y[tr_idx].astype(int),
            labeled_mask=mask,
            test_x=dataset.test_x[te_mask],
            test_y=dataset.test_y[te_mask].astype(int),
        )
        if val_fraction > 0:
            va_idx = np.concatenate(va_idx)
            task.val_x = dataset.train_x[va_idx]
            task.val_y = dataset.train_y[va_idx].astype(int)
        tasks.append(task)
    return TaskStream(tasks, p_s, batch_size=batch_size, epochs_per_task=epochs_per_task)


# ---------------------------------------------------------------------------
# Synthetic / toy datasets
# ---------------------------------------------------------------------------

def make_blobs(num_classes=10, dim=16, train_per_class=500, test_per_class=200,
               separation=2.5, modes_per_class=2, seed=0):
    """Gaussian-blob classes; each class is a mixture of ``modes_per_class``
    unit-variance modes whose centers are drawn at radius ``separation``."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, modes_per_class, dim))
    centers *= separation / np.linalg.norm(centers, axis=-1, keepdims=True)

    def draw(n_per_class):
        xs, ys = [], []
        for c in range(num_classes):
            modes = rng.integers(0, modes_per_class, size=n_per_class)
            xs.append(centers[c, modes] + rng.standard_normal((n_per_class, dim)))
            ys.append(np.full(n_per_class, c))
        return np.concatenate(xs), np.concatenate(ys)

    train_x, train_y = draw(train_per_class)
    test_x, test_y = draw(test_per_class)
    return Dataset(train_x, train_y, test_x, test_y, num_classes)


def load_digits_dataset(test_per_class=30, seed=0):
    """8x8 grayscale digits (10 classes), shaped (1, 8, 8), scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    x = (raw.images / 16.0).astype(np.float64)[:, None, :, :]
    y = raw.target.astype(int)
    min_count = int(np.bincount(y).min())
    if test_per_class >= min_count:
        raise ConfigurationError(
            f"test_per_class={test_per_class} leaves no training examples "
            f"(smallest class has {min_count})"
        )
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(10):
        c_idx = np.flatnonzero(y == c)
        c_idx = c_idx[rng.permutation(len(c_idx))]
        test_idx.append(c_idx[:test_per_class])
        train_idx.append(c_idx[test_per_class:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx], 10)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    jitter_sigma: float = 0.1   # additive Gaussian noise (flat vectors and images)
    crop_pad: int = 0           # images: random shift within +-crop_pad
    flip: bool = False          # images: horizontal flip with prob 0.5


def flip_horizontal(x):
    """Mirror an image (..., H, W) along its width axis."""
    return x[..., ::-1].copy()


def shift_crop(x, dy, dx):
    """Zero-padded translation of an image (..., H, W); (0, 0) is the identity."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = x[..., src_y, src_x]
    return out


def augment_batch(x, rng, config=None):
    """Label-preserving stochastic perturbation of a batch.

    Image-shaped batches (n, C, H, W) get random shift-crops and horizontal
    flips followed by Gaussian jitter; flat batches (n, d) get jitter alone.
    """
    config = config or AugmentConfig()
    x = np.asarray(x)
    if len(x) == 0:
        return x.copy()
    if x.ndim >= 3:
        out = np.empty_like(x)
        p = config.crop_pad
        for i in range(len(x)):
            dy, dx = rng.integers(-p, p + 1, size=2)
            img = shift_crop(x[i], int(dy), int(dx))
            if config.flip and rng.random() < 0.5:
                img = flip_horizontal(img)
            out[i] = img
        return out + config.jitter_sigma * rng.standard_normal(x.shape)
    return x + config.jitter_sigma * rng.standard_normal(x.shape)


# ---------------------------------------------------------------------------
# Dataset container format
# ---------------------------------------------------------------------------
#
# Binary layout (little-endian):
#   int64 n, int64 ndim, int64 dims[ndim], int64 num_classes
#   then n rows of: int64 class_id, float64 features (row-major)
# CSV layout: first line "n,feature_dim,num_classes" (flat features only),
#   then one line per row: class_id, feature values.

def save_examples_bin(path, x, y, extra_int=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    dims = x.shape[1:]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qq", len(x), len(dims)))
        fh.write(struct.pack(f"<{len(dims)}q", *dims))
        n_classes = int(y.max()) + 1 if len(y) else 0
        fh.write(struct.pack("<q", n_classes))
        for i in range(len(x)):
            fh.write(struct.pack("<q", int(y[i])))
            if extra_int is not None:
                fh.write(struct.pack("<q", int(extra_int[i])))
            fh.write(x[i].astype("<f8").tobytes())


def load_examples_bin(path, has_extra_int=False):
    with open(path, "rb") as fh:
        n, ndim = struct.unpack("<qq", fh.read(16))
        dims = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        (num_classes,) = struct.unpack("<q", fh.read(8))
        row_elems = int(np.prod(dims)) if ndim else 1
        x = np.empty((n, *dims), dtype=np.float64)
        y = np.empty(n, dtype=np.int64)
        extra = np.empty(n, dtype=np.int64) if has_extra_int else None
        for i in range(n):
            (y[i],) = struct.unpack("<q", fh.read(8))
            if has_extra_int:
                (extra[i],) = struct.unpack("<q", fh.read(8))
            x[i] = np.frombuffer(fh.read(8 * row_elems), dtype="<f8").reshape(dims)
    if has_extra_int:
        return x, y, extra, num_classes
    return x, y, num_classes


def save_examples_csv(path, x, y):
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.int64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_classes = int(y.max()) + 1 if len(y) else 0
        writer.writerow([len(x), x.shape[1], n_classes])
        for i in range(len(x)):
            writer.writerow([int(y[i]), *(repr(float(v)) for v in x[i])])


def load_examples_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        n, dim, num_classes = (int(v) for v in next(reader))
        x = np.empty((n, dim), dtype=np.float64)
        y = np.empty(n, dtype=np.int64)
        for i, row in enumerate(reader):
            y[i] = int(row[0])
            x[i] = [float(v) for v in row[1:]]
    return x, y, num_classes
