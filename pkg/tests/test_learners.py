"""Strategy invariants: no-ops, pseudo-labeling rules, consistency-target
collapse, composite gradient checks, label hygiene, and inference paths."""

import numpy as np
import pytest

from wscl import losses
from wscl.data import AugmentConfig, Batch, build_split, forbid_hidden_labels, make_blobs
from wscl.exceptions import ConfigurationError
from wscl.learners import BUFFERED_METHODS, METHODS, Learner, LearnerConfig
from wscl.nn import Dense, Network, finite_difference_gradient, make_mlp

DIM = 4
CLASSES = 4


def identity_augment():
    return AugmentConfig(jitter_sigma=0.0, crop_pad=0, flip=False)


def make_learner(method, seed=0, **kw):
    kw.setdefault("augment", identity_augment())
    cfg = LearnerConfig(method=method, **kw)
    net = make_mlp(DIM, (8, 8), CLASSES, np.random.default_rng([seed, 7]),
                   embedding=cfg.embedding)
    return Learner(net, cfg, np.random.default_rng([seed, 11]))


def make_batch(rng, n_labeled=4, n_unlabeled=4, classes=(0, 1)):
    return Batch(
        x_labeled=rng.standard_normal((n_labeled, DIM)),
        y_labeled=rng.choice(classes, size=n_labeled),
        x_unlabeled=rng.standard_normal((n_unlabeled, DIM)),
    )


def constant_logit_net(logits_row):
    """Single dense layer with W = 0, so every input maps to ``logits_row``."""
    net = make_mlp(DIM, (), len(logits_row), np.random.default_rng(0))
    theta = np.zeros(net.n_params)
    theta[-len(logits_row):] = logits_row
    net.set_params(theta)
    return net


# ---------------------------------------------------------------------------
# configuration resolution
# ---------------------------------------------------------------------------

def test_unknown_method_rejected():
    with pytest.raises(ConfigurationError):
        make_learner("gdumb")


def test_default_optimizer_and_lr_per_method():
    assert LearnerConfig(method="er").resolved_optimizer() == "sgd"
    assert LearnerConfig(method="ccic").resolved_optimizer() == "adam"
    assert LearnerConfig(method="er").resolved_lr() == pytest.approx(0.05)
    assert LearnerConfig(method="ccic").resolved_lr() == pytest.approx(0.001)
    assert LearnerConfig(method="ccic", optimizer="sgd").resolved_lr() == pytest.approx(0.05)
    assert LearnerConfig(method="er", lr=0.7).resolved_lr() == pytest.approx(0.7)


def test_only_buffered_methods_get_buffers():
    for method in METHODS:
        learner = make_learner(method)
        if method in BUFFERED_METHODS:
            assert learner.buffer is not None
        else:
            assert learner.buffer is None


# ---------------------------------------------------------------------------
# no-op and zero-lr invariants
# ---------------------------------------------------------------------------

def test_zero_lr_leaves_parameters_unchanged_for_every_method():
    rng = np.random.default_rng(0)
    for method in METHODS:
        learner = make_learner(method, lr=0.0)
        learner.start_task(0, [0, 1])
        theta = learner.net.get_params().copy()
        for _ in range(3):
            learner.step(make_batch(rng))
        np.testing.assert_array_equal(learner.net.get_params(), theta)


def test_finetune_empty_labeled_batch_is_noop():
    learner = make_learner("sgd")
    learner.start_task(0, [0, 1])
    theta = learner.net.get_params().copy()
    batch = Batch(np.zeros((0, DIM)), np.zeros(0, dtype=int),
                  np.random.default_rng(0).standard_normal((3, DIM)))
    bd = learner.step(batch)
    assert bd.flags.get("noop")
    np.testing.assert_array_equal(learner.net.get_params(), theta)


def test_er_empty_batch_and_buffer_is_noop():
    learner = make_learner("er")
    learner.start_task(0, [0, 1])
    theta = learner.net.get_params().copy()
    bd = learner.step(Batch(np.zeros((0, DIM)), np.zeros(0, dtype=int),
                            np.zeros((0, DIM))))
    assert bd.flags.get("noop")
    np.testing.assert_array_equal(learner.net.get_params(), theta)


def test_er_inserts_only_labeled_stream_items():
    rng = np.random.default_rng(0)
    learner = make_learner("er")
    learner.start_task(0, [0, 1])
    batch = make_batch(rng, n_labeled=3, n_unlabeled=5)
    learner.step(batch)
    assert len(learner.buffer) == 3


def test_step_matches_manual_gradient_for_er():
    rng = np.random.default_rng(3)
    learner = make_learner("er", lr=0.1, optimizer="sgd")
    learner.start_task(0, [0, 1])
    batch = make_batch(rng, n_labeled=4, n_unlabeled=0)
    theta = learner.net.get_params().copy()
    logits, _, cache = learner.net.forward(batch.x_labeled, return_cache=True)
    _, dlogits = losses.cross_entropy_loss(logits, batch.y_labeled)
    expected = theta - 0.1 * learner.net.backward(cache, dlogits)
    learner.step(batch)
    np.testing.assert_allclose(learner.net.get_params(), expected, atol=1e-12)


# ---------------------------------------------------------------------------
# pseudo-labeling
# ---------------------------------------------------------------------------

def test_pseudo_er_requires_two_classes():
    learner = make_learner("pseudo_er")
    with pytest.raises(ConfigurationError):
        learner.start_task(0, [0])


def test_pseudo_label_gap_rule():
    # logits over 4 classes; current task restricted to classes (2, 3)
    net = constant_logit_net([0.0, 9.0, 4.0, 1.0])
    cfg = LearnerConfig(method="pseudo_er", eta=2.0, augment=identity_augment())
    learner = Learner(net, cfg, np.random.default_rng(0))
    learner.start_task(1, [2, 3])
    x = np.random.default_rng(0).standard_normal((5, DIM))
    accepted, labels = learner.pseudo_label(x)
    # restricted logits [4, 1]: gap 3 > 2, argmax is class 2; the out-of-task
    # class 1 logit (9.0) plays no role
    assert len(accepted) == 5
    assert np.all(labels == 2)


def test_pseudo_label_rejects_small_gap_and_ties():
    net = constant_logit_net([0.0, 0.0, 3.0, 3.0])
    cfg = LearnerConfig(method="pseudo_er", eta=0.5, augment=identity_augment())
    learner = Learner(net, cfg, np.random.default_rng(0))
    learner.start_task(1, [2, 3])
    accepted, labels = learner.pseudo_label(np.zeros((4, DIM)))
    assert len(accepted) == 0


def test_pseudo_label_infinite_threshold_degenerates_to_er():
    rng = np.random.default_rng(0)
    a = make_learner("pseudo_er", seed=5, eta=np.inf)
    b = make_learner("er", seed=5)
    a.start_task(0, [0, 1])
    b.start_task(0, [0, 1])
    for _ in range(4):
        batch = make_batch(np.random.default_rng(77))
        a.step(batch)
        b.step(batch)
    np.testing.assert_allclose(a.net.get_params(), b.net.get_params(), atol=1e-12)


def test_pseudo_er_accepted_items_enter_buffer():
    net = constant_logit_net([0.0, 0.0, 5.0, 0.0])
    cfg = LearnerConfig(method="pseudo_er", eta=1.0, augment=identity_augment())
    learner = Learner(net, cfg, np.random.default_rng(0))
    learner.start_task(1, [2, 3])
    batch = Batch(np.zeros((0, DIM)), np.zeros(0, dtype=int), np.ones((3, DIM)))
    bd = learner.step(batch)
    assert bd.flags["pseudo_accepted"] == 3
    _, y, _ = learner.buffer.as_arrays()
    assert np.all(y == 2)


# ---------------------------------------------------------------------------
# interpolation consistency structure
# ---------------------------------------------------------------------------

def test_cic_targets_collapse_with_identity_augment_and_no_mixup():
    rng = np.random.default_rng(0)
    learner = make_learner("cic", use_mixup=False, tau=0.5, n_aug=3)
    learner.start_task(0, [0, 1])
    batch = make_batch(rng, n_labeled=2, n_unlabeled=3)
    logits_before, _ = learner.net.forward(batch.x_unlabeled)
    expected = losses.sharpen(losses.softmax(logits_before), 0.5)
    learner.step(batch)
    targets = learner.last_step["targets"]
    assert targets.shape == (9, CLASSES)
    np.testing.assert_allclose(targets, np.repeat(expected, 3, axis=0), atol=1e-9)
    # identity augmentation: the unlabeled set is the raw items repeated
    np.testing.assert_allclose(
        learner.last_step["u"], np.repeat(batch.x_unlabeled, 3, axis=0), atol=0)


def test_cic_without_unlabeled_reduces_to_supervised_path():
    rng = np.random.default_rng(1)
    learner = make_learner("cic")
    learner.start_task(0, [0, 1])
    batch = make_batch(rng, n_labeled=4, n_unlabeled=0)
    bd = learner.step(batch)
    assert bd.flags.get("l_u_inactive")
    assert bd.l_u == 0.0


def test_cic_sharpen_switch_changes_target_entropy():
    rng = np.random.default_rng(2)
    sharp = make_learner("cic", use_mixup=False, tau=0.5)
    plain = make_learner("cic", use_mixup=False, use_sharpen=False)
    for learner in (sharp, plain):
        learner.start_task(0, [0, 1])
        learner.step(make_batch(np.random.default_rng(5)))

    def entropy(p):
        return float(-(p * np.log(np.clip(p, 1e-12, None))).sum(axis=1).mean())

    assert entropy(sharp.last_step["targets"]) < entropy(plain.last_step["targets"])


def test_mixup_keeps_supervised_inputs_near_originals():
    rng = np.random.default_rng(3)
    learner = make_learner("cic", gamma=0.5)
    learner.start_task(0, [0, 1])
    batch = make_batch(rng, n_labeled=4, n_unlabeled=4)
    learner.step(batch)
    s = learner.last_step["s"]
    # asymmetric mixup: each mixed row is at least halfway toward its source
    assert s.shape == (4, DIM)


# ---------------------------------------------------------------------------
# composite gradient checks (training steps vs finite differences)
# ---------------------------------------------------------------------------

def relative_error(a, b):
    # the floor absorbs central-difference roundoff on exactly-zero entries
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-5)
    return np.max(np.abs(a - b) / denom)


def composite_check(grad_and_loss, net, n_coords=80, seed=0):
    """``grad_and_loss(theta)`` returns (analytic_grad, loss_value); the loss
    part is re-evaluated under central differences."""
    theta = net.get_params().copy()
    analytic, _ = grad_and_loss(theta)
    coords = np.random.default_rng(seed).choice(
        theta.size, size=min(n_coords, theta.size), replace=False)
    numeric = finite_difference_gradient(
        lambda v: grad_and_loss(v)[1], theta, eps=1e-5, coords=coords)
    assert relative_error(analytic[coords], numeric[coords]) <= 1e-4


def test_cic_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    learner = make_learner("cic", seed=2, lam=0.7)
    net = learner.net
    s = rng.standard_normal((4, DIM))
    s_y = rng.integers(0, CLASSES, size=4)
    u = rng.standard_normal((6, DIM))
    targets = losses.sharpen(losses.softmax(rng.standard_normal((6, CLASSES))), 0.5)

    def grad_and_loss(theta):
        saved = net.get_params()
        net.set_params(theta)
        logits_s, _, cache_s = net.forward(s, return_cache=True)
        l_s, dl_s = losses.cross_entropy_loss(logits_s, s_y)
        grad = net.backward(cache_s, dl_s)
        logits_u, _, cache_u = net.forward(u, return_cache=True)
        l_u, dl_u = losses.consistency_loss(logits_u, targets)
        grad = grad + net.backward(cache_u, 0.7 * dl_u)
        net.set_params(saved)
        return grad, l_s + 0.7 * l_u

    composite_check(grad_and_loss, net)


@pytest.mark.parametrize("embedding", ["logits", "penultimate"])
def test_ccic_mining_composite_gradient_matches_finite_differences(embedding):
    learner = make_learner("ccic", seed=3, embedding=embedding)
    net = learner.net
    mu, alpha, beta = 0.4, 2.0, 2.0
    # resample until every hinge margin is clear of its kink, so central
    # differences see a locally smooth objective
    for attempt in range(50):
        rng = np.random.default_rng([5, attempt])
        a = rng.standard_normal((3, DIM))
        p = rng.standard_normal((3, DIM))
        n = rng.standard_normal((3, DIM))
        _, a_emb = net.forward(a)
        _, p_emb = net.forward(p)
        _, n_emb = net.forward(n)
        d_n = ((a_emb - n_emb) ** 2).sum(axis=1)
        d_p = ((a_emb - p_emb) ** 2).sum(axis=1)
        if (np.all(np.abs(beta - d_n + d_p) > 1e-2)
                and np.all(np.abs(alpha - d_n) > 1e-2)):
            break
    else:
        raise AssertionError("no sample away from hinge kinks")

    def grad_and_loss(theta):
        saved = net.get_params()
        net.set_params(theta)
        _, a_emb, a_cache = net.forward(a, return_cache=True)
        _, p_emb, p_cache = net.forward(p, return_cache=True)
        _, n_emb, n_cache = net.forward(n, return_cache=True)
        l_sm, da, dp, dn = losses.triplet_mining_loss(a_emb, p_emb, n_emb, beta)
        zeros = np.zeros((3, CLASSES))
        grad = net.backward(a_cache, zeros, dembedding=da)
        grad = grad + net.backward(p_cache, zeros, dembedding=dp)
        grad = grad + net.backward(n_cache, zeros, dembedding=dn)
        l_um, ha, hn = losses.negative_mining_loss(a_emb, n_emb, alpha)
        grad = grad + net.backward(a_cache, zeros, dembedding=mu * ha)
        grad = grad + net.backward(n_cache, zeros, dembedding=mu * hn)
        net.set_params(saved)
        return grad, l_sm + mu * l_um

    composite_check(grad_and_loss, net)


# ---------------------------------------------------------------------------
# mining pools
# ---------------------------------------------------------------------------

def test_across_mining_inactive_without_past_tasks():
    rng = np.random.default_rng(6)
    learner = make_learner("ccic", mining="across")
    learner.start_task(0, [0, 1])
    bd = learner.step(make_batch(rng))
    assert bd.flags.get("l_um_inactive")


def test_mining_variants_all_run():
    for mode in ("across", "within", "agnostic"):
        learner = make_learner("ccic", mining=mode, seed=8)
        rng = np.random.default_rng(9)
        for t, classes in enumerate([[0, 1], [2, 3]]):
            learner.start_task(t, classes)
            for _ in range(3):
                bd = learner.step(make_batch(rng, classes=tuple(classes)))
                assert np.isfinite(bd.total)
        if mode == "across":
            # second task has past buffer items, so mining was active
            assert not bd.flags.get("l_um_inactive")


def test_unknown_mining_mode_raises():
    learner = make_learner("ccic", mining="nearest")
    learner.start_task(0, [0, 1])
    with pytest.raises(ConfigurationError):
        learner.step(make_batch(np.random.default_rng(0)))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def test_predict_masks_unseen_classes():
    net = constant_logit_net([5.0, 4.0, 3.0, 2.0])
    cfg = LearnerConfig(method="sgd", augment=identity_augment())
    learner = Learner(net, cfg, np.random.default_rng(0))
    preds = learner.predict(np.zeros((3, DIM)), seen_classes=[2, 3])
    assert np.all(preds == 2)


def test_ccic_predicts_with_knn_and_falls_back_when_empty():
    learner = make_learner("ccic", seed=10, knn_k=1)
    learner.start_task(0, [0, 1])
    x = np.random.default_rng(11).standard_normal((2, DIM))
    with pytest.warns(UserWarning, match="empty buffer"):
        learner.predict(x, seen_classes=[0, 1])
    learner.buffer.try_insert(x[0], 1, 0, learner.rng)
    preds = learner.predict(x, seen_classes=[0, 1])
    assert preds[0] == 1  # nearest stored item is x[0] itself
    disabled = make_learner("ccic", seed=10, use_knn=False)
    disabled.start_task(0, [0, 1])
    disabled.buffer.try_insert(x[0], 1, 0, disabled.rng)
    logits, _ = disabled.net.forward(x)
    np.testing.assert_array_equal(
        disabled.predict(x, seen_classes=[0, 1]), np.argmax(logits[:, :2], axis=1))


# ---------------------------------------------------------------------------
# label hygiene
# ---------------------------------------------------------------------------

def test_no_method_reads_hidden_labels_during_training():
    dataset = make_blobs(num_classes=4, dim=DIM, train_per_class=24,
                         test_per_class=4, seed=0)
    for method in METHODS:
        stream = build_split(dataset, num_tasks=2, p_s=0.5, seed=0, batch_size=8)
        learner = make_learner(method, seed=12)
        with forbid_hidden_labels():
            for t in range(2):
                learner.start_task(t, stream.classes_of(t))
                for batch in stream.epoch_batches(t, np.random.default_rng(13)):
                    learner.step(batch)


def test_same_seed_same_trajectory():
    for method in ("er", "cic", "ccic"):
        runs = []
        for _ in range(2):
            learner = make_learner(method, seed=14)
            learner.start_task(0, [0, 1])
            for _ in range(3):
                learner.step(make_batch(np.random.default_rng(15)))
            runs.append(learner.net.get_params())
        np.testing.assert_array_equal(runs[0], runs[1])
