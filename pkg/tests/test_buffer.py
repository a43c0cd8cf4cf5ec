"""Reservoir statistics, sampling behavior, kNN oracle, and persistence."""

import numpy as np
import pytest

from wscl.buffer import ReservoirBuffer, knn_fit_and_predict
from wscl.exceptions import ConfigurationError
from wscl.nn import make_mlp


def fill(buf, n, rng, dim=2, start=0):
    for i in range(start, start + n):
        buf.try_insert(np.full(dim, float(i)), label=i % 3, task_id=0, rng=rng)


# ---------------------------------------------------------------------------
# reservoir insertion
# ---------------------------------------------------------------------------

def test_capacity_never_exceeded():
    rng = np.random.default_rng(0)
    buf = ReservoirBuffer(10)
    fill(buf, 500, rng)
    assert len(buf) == 10
    assert buf.n_seen == 500


def test_buffer_below_capacity_keeps_everything():
    rng = np.random.default_rng(0)
    buf = ReservoirBuffer(50)
    fill(buf, 20, rng)
    x, y, task = buf.as_arrays()
    assert len(buf) == 20
    np.testing.assert_array_equal(x[:, 0], np.arange(20, dtype=float))


def test_buffer_requires_labels_and_positive_capacity():
    with pytest.raises(ConfigurationError):
        ReservoirBuffer(0)
    buf = ReservoirBuffer(5)
    with pytest.raises(ConfigurationError):
        buf.try_insert(np.zeros(2), None, 0, np.random.default_rng(0))


def test_reservoir_residence_is_uniform():
    # Monte Carlo estimate of per-item residence frequency against m/n.
    m, n, trials = 20, 400, 600
    counts = np.zeros(n)
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        buf = ReservoirBuffer(m)
        for i in range(n):
            buf.try_insert(np.array([float(i)]), 0, 0, rng)
        x, _, _ = buf.as_arrays()
        counts[x[:, 0].astype(int)] += 1
    p = m / n
    sigma = np.sqrt(p * (1 - p) / trials)
    freqs = counts / trials
    assert np.all(np.abs(freqs - p) < 4 * sigma + 1e-9), (
        f"max deviation {np.max(np.abs(freqs - p)):.4f} vs sigma {sigma:.4f}"
    )


def test_sample_without_replacement_when_k_small():
    rng = np.random.default_rng(1)
    buf = ReservoirBuffer(30)
    fill(buf, 30, rng)
    x, y = buf.sample(10, rng)
    assert len(x) == 10
    assert len(np.unique(x[:, 0])) == 10


def test_sample_with_replacement_when_k_exceeds_size():
    rng = np.random.default_rng(2)
    buf = ReservoirBuffer(5)
    fill(buf, 3, rng)
    x, y = buf.sample(10, rng)
    assert len(x) == 10


def test_sample_empty_buffer_or_zero_k():
    rng = np.random.default_rng(3)
    buf = ReservoirBuffer(5)
    x, y = buf.sample(4, rng)
    assert len(x) == 0 and len(y) == 0
    fill(buf, 3, rng)
    x, y = buf.sample(0, rng)
    assert len(x) == 0


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    buf = ReservoirBuffer(8)
    fill(buf, 8, rng, dim=3)
    path = tmp_path / "buffer.bin"
    buf.save(path)
    loaded = ReservoirBuffer.load(path)
    x0, y0, t0 = buf.as_arrays()
    x1, y1, t1 = loaded.as_arrays()
    np.testing.assert_array_equal(x0, x1)
    np.testing.assert_array_equal(y0, y1)
    np.testing.assert_array_equal(t0, t1)


# ---------------------------------------------------------------------------
# kNN classification
# ---------------------------------------------------------------------------

def brute_force_knn(buf, net, queries, k):
    """Independent all-pairs reimplementation of the tie-breaking rules."""
    x, y, _ = buf.as_arrays()
    _, ref = net.forward(x)
    _, qs = net.forward(np.asarray(queries))
    preds = []
    for q in qs:
        dist = np.sum((ref - q) ** 2, axis=1)
        nearest = np.argsort(dist, kind="stable")[:k]
        votes = {}
        for idx in nearest:
            votes.setdefault(int(y[idx]), []).append(dist[idx])
        best = max(len(v) for v in votes.values())
        tied = [c for c, v in votes.items() if len(v) == best]
        if len(tied) > 1:
            sums = {c: sum(votes[c]) for c in tied}
            low = min(sums.values())
            tied = [c for c in tied if sums[c] == low]
        preds.append(min(tied))
    return np.array(preds)


def random_setup(seed, n_items=120, n_queries=25, dim=4, classes=5):
    rng = np.random.default_rng(seed)
    net = make_mlp(dim, (8,), classes, rng)
    buf = ReservoirBuffer(n_items)
    for _ in range(n_items):
        buf.try_insert(rng.standard_normal(dim), rng.integers(0, classes), 0, rng)
    queries = rng.standard_normal((n_queries, dim))
    return buf, net, queries


def test_knn_matches_brute_force_oracle():
    for seed in range(4):
        buf, net, queries = random_setup(seed)
        for k in (1, 5, 12):
            got = knn_fit_and_predict(buf, net, queries, k)
            expected = brute_force_knn(buf, net, queries, k)
            np.testing.assert_array_equal(got, expected)


def test_knn_single_class_buffer_always_returns_that_class():
    rng = np.random.default_rng(0)
    net = make_mlp(3, (4,), 4, rng)
    buf = ReservoirBuffer(10)
    for _ in range(10):
        buf.try_insert(rng.standard_normal(3), 2, 0, rng)
    preds = knn_fit_and_predict(buf, net, rng.standard_normal((6, 3)), 3)
    assert np.all(preds == 2)


def test_knn_tie_breaks_by_distance_then_class_id():
    # identity-ish embedding: single dense layer set to the identity map
    rng = np.random.default_rng(0)
    net = make_mlp(2, (), 2, rng)
    net.set_params(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    buf = ReservoirBuffer(4)
    buf.try_insert(np.array([1.0, 0.0]), 0, 0, rng)   # distance 1 from origin
    buf.try_insert(np.array([0.0, 2.0]), 1, 0, rng)   # distance 4
    # k=2, one vote each: class 0 wins on smaller summed distance
    assert knn_fit_and_predict(buf, net, np.zeros((1, 2)), 2)[0] == 0
    # equal distances: lowest class id wins
    buf2 = ReservoirBuffer(2)
    buf2.try_insert(np.array([1.0, 0.0]), 1, 0, rng)
    buf2.try_insert(np.array([-1.0, 0.0]), 0, 0, rng)
    assert knn_fit_and_predict(buf2, net, np.zeros((1, 2)), 2)[0] == 0


def test_knn_clamps_oversized_k_with_warning():
    buf, net, queries = random_setup(0, n_items=3, n_queries=2)
    with pytest.warns(UserWarning, match="clamped"):
        preds = knn_fit_and_predict(buf, net, queries, 10)
    np.testing.assert_array_equal(preds, brute_force_knn(buf, net, queries, 3))


def test_knn_empty_buffer_raises():
    _, net, queries = random_setup(0)
    with pytest.raises(ConfigurationError):
        knn_fit_and_predict(ReservoirBuffer(5), net, queries, 3)
