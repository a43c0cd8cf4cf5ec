"""Training strategies: SGD finetuning, joint training, experience replay,
pseudo-label replay, interpolation consistency (with replay), and its
contrastive extension with margin mining and kNN inference."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .buffer import ReservoirBuffer, knn_fit_and_predict
from .data import AugmentConfig, augment_batch
from .exceptions import ConfigurationError
from .nn import make_optimizer

METHODS = ("sgd", "joint", "er", "pseudo_er", "cic", "ccic")
BUFFERED_METHODS = ("er", "pseudo_er", "cic", "ccic")


@dataclass
class LearnerConfig:
    """Hyperparameters for one training strategy."""

    method: str = "er"
    buffer_size: int = 200
    lr: float | None = None      # None picks the optimizer default
    optimizer: str = ""          # "" picks the method default (adam for ccic)
    epochs_per_task: int = 10
    replay_size: int = 32        # memory minibatch size
    lam: float = 0.03            # weight of the consistency term
    mu: float = 0.1              # weight of the unsupervised mining term
    alpha: float = 1.0           # negative-pair margin
    beta: float = 1.0            # triplet margin
    tau: float = 0.5             # sharpening temperature
    eta: float = 0.5             # pseudo-label confidence threshold (logit gap)
    n_aug: int = 2               # augmentations per unlabeled example
    gamma: float = 0.1           # mixup Beta parameter
    knn_k: int = 5
    mining: str = "across"       # across | within | agnostic
    embedding: str = "logits"    # logits | penultimate
    use_mixup: bool = True
    use_sharpen: bool = True
    use_unsup_loss: bool = True
    use_knn: bool = True
    use_sup_mining: bool = True
    use_unsup_mining: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def resolved_optimizer(self):
        if self.optimizer:
            return self.optimizer
        return "adam" if self.method == "ccic" else "sgd"

    def resolved_lr(self):
        if self.lr is not None:
            return self.lr
        return 0.001 if self.resolved_optimizer() == "adam" else 0.05


def _vcat(*arrays):
    parts = [np.asarray(a) for a in arrays if len(a)]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


class Learner:
    """One model + one strategy; consumes batches and updates the network."""

    def __init__(self, net, config, rng):
        if config.method not in METHODS:
            raise ConfigurationError(f"unknown method {config.method!r}")
        self.net = net
        self.cfg = config
        self.rng = rng
        self.optimizer = make_optimizer(
            config.resolved_optimizer(), config.resolved_lr()
        )
        self.buffer = (
            ReservoirBuffer(config.buffer_size)
            if config.method in BUFFERED_METHODS
            else None
        )
        self.current_task = -1
        self.current_classes = []
        self.last_step = {}

    # -- task lifecycle -----------------------------------------------------

    def start_task(self, task_id, classes):
        if self.cfg.method == "pseudo_er" and len(classes) < 2:
            raise ConfigurationError("pseudo-labeling needs >= 2 classes per task")
        self.current_task = task_id
        self.current_classes = list(classes)

    # -- shared plumbing ----------------------------------------------------

    def _apply(self, grad):
        theta = self.net.get_params()
        self.net.set_params(self.optimizer.step(theta, grad))

    def _supervised_grad(self, x, y, breakdown):
        logits, _, cache = self.net.forward(x, return_cache=True)
        value, dlogits = losses.cross_entropy_loss(logits, y)
        breakdown.l_s = value
        return self.net.backward(cache, dlogits)

    def _insert_labeled(self, x, y, task_id=None):
        t = self.current_task if task_id is None else task_id
        for i in range(len(x)):
            self.buffer.try_insert(x[i], int(y[i]), t, self.rng)

    # -- steps --------------------------------------------------------------

    def step(self, batch):
        method = self.cfg.method
        if method in ("sgd", "joint"):
            return self.step_finetune(batch)
        if method == "er":
            return self.step_er(batch)
        if method == "pseudo_er":
            return self.step_pseudo_er(batch)
        if method == "cic":
            return self.step_cic(batch)
        return self.step_ccic(batch)

    def _breakdown(self):
        return losses.LossBreakdown(lam=self.cfg.lam, mu=self.cfg.mu)

    def step_finetune(self, batch):
        """Cross-entropy on the labeled stream items only; unlabeled dropped."""
        bd = self._breakdown()
        if len(batch.x_labeled) == 0:
            bd.flags["noop"] = True
            return bd
        self._apply(self._supervised_grad(batch.x_labeled, batch.y_labeled, bd))
        return bd

    def step_er(self, batch):
        """Replay: cross-entropy over stream labels plus a buffer minibatch."""
        bd = self._breakdown()
        xb, yb = self.buffer.sample(self.cfg.replay_size, self.rng)
        x = _vcat(batch.x_labeled, xb)
        y = _vcat(batch.y_labeled, yb).astype(int)
        if len(x):
            self._apply(self._supervised_grad(x, y, bd))
        else:
            bd.flags["noop"] = True
        self._insert_labeled(batch.x_labeled, batch.y_labeled)
        return bd

    def pseudo_label(self, x_unlabeled):
        """Confident current-task pseudo-labels: top-2 logit gap above eta.

        Returns (accepted inputs, their global class ids)."""
        if len(x_unlabeled) == 0:
            return x_unlabeled, np.zeros(0, dtype=int)
        logits, _ = self.net.forward(x_unlabeled)
        restricted = logits[:, self.current_classes]
        order = np.argsort(restricted, axis=1)
        top1 = restricted[np.arange(len(restricted)), order[:, -1]]
        top2 = restricted[np.arange(len(restricted)), order[:, -2]]
        accepted = (top1 - top2) > self.cfg.eta
        labels = np.asarray(self.current_classes)[order[accepted, -1]]
        return x_unlabeled[accepted], labels

    def step_pseudo_er(self, batch):
        """ER where confidently pseudo-labeled unlabeled items count as labeled."""
        bd = self._breakdown()
        xb, yb = self.buffer.sample(self.cfg.replay_size, self.rng)
        x_pseudo, y_pseudo = self.pseudo_label(batch.x_unlabeled)
        bd.flags["pseudo_accepted"] = len(x_pseudo)
        x = _vcat(batch.x_labeled, xb, x_pseudo)
        y = _vcat(batch.y_labeled, yb, y_pseudo).astype(int)
        if len(x):
            self._apply(self._supervised_grad(x, y, bd))
        else:
            bd.flags["noop"] = True
        self._insert_labeled(batch.x_labeled, batch.y_labeled)
        self._insert_labeled(x_pseudo, y_pseudo)
        return bd

    # -- interpolation consistency ------------------------------------------

    def _mixup_coefficients(self, n):
        zeta = self.rng.beta(self.cfg.gamma, self.cfg.gamma, size=n)
        return np.maximum(zeta, 1.0 - zeta)

    def _consistency_parts(self, batch):
        """Build the augmented supervised/unsupervised sets, their (soft)
        targets, and the resulting gradient; shared by CIC and CCIC."""
        cfg = self.cfg
        bd = self._breakdown()
        xb, yb = self.buffer.sample(cfg.replay_size, self.rng)
        s_raw = _vcat(batch.x_labeled, xb)
        s_y = _vcat(batch.y_labeled, yb).astype(int)
        s = augment_batch(s_raw, self.rng, cfg.augment) if len(s_raw) else s_raw

        u = np.zeros((0,) + s.shape[1:]) if s.ndim > 1 else np.zeros((0,))
        targets = np.zeros((0, self.net.num_classes))
        if cfg.use_unsup_loss and len(batch.x_unlabeled):
            u = augment_batch(
                np.repeat(batch.x_unlabeled, cfg.n_aug, axis=0), self.rng, cfg.augment
            )
            logits_u, _ = self.net.forward(u)
            mean_logits = logits_u.reshape(
                len(batch.x_unlabeled), cfg.n_aug, -1
            ).mean(axis=1)
            guessed = losses.softmax(mean_logits)
            if cfg.use_sharpen:
                guessed = losses.sharpen(guessed, cfg.tau)
            targets = np.repeat(guessed, cfg.n_aug, axis=0)

        if cfg.use_mixup and (len(s) + len(u)):
            pool = _vcat(s, u)
            mixed = pool[self.rng.permutation(len(pool))]
            if len(s):
                s = losses.mixup(s, mixed[: len(s)], self._mixup_coefficients(len(s)))
            if len(u):
                u = losses.mixup(u, mixed[len(s):], self._mixup_coefficients(len(u)))

        grad = np.zeros(self.net.n_params)
        if len(s):
            logits, _, cache = self.net.forward(s, return_cache=True)
            bd.l_s, dlogits = losses.cross_entropy_loss(logits, s_y)
            grad += self.net.backward(cache, dlogits)
        if len(u):
            logits, _, cache = self.net.forward(u, return_cache=True)
            bd.l_u, dlogits = losses.consistency_loss(logits, targets)
            grad += self.net.backward(cache, cfg.lam * dlogits)
        else:
            bd.flags["l_u_inactive"] = True

        self.last_step = {
            "s": s, "s_y": s_y, "u": u, "targets": targets,
            "replay": (xb, yb),
        }
        return grad, bd

    def step_cic(self, batch):
        grad, bd = self._consistency_parts(batch)
        if len(self.last_step["s"]) or len(self.last_step["u"]):
            self._apply(grad)
        else:
            bd.flags["noop"] = True
        self._insert_labeled(batch.x_labeled, batch.y_labeled)
        return bd

    # -- contrastive mining --------------------------------------------------

    def _embedding_grad(self, x, d_emb):
        _, _, cache = self.net.forward(x, return_cache=True)
        zeros = np.zeros((len(x), self.net.num_classes))
        return self.net.backward(cache, zeros, dembedding=d_emb)

    def _negative_pool(self, batch):
        bx, by, btask = self.buffer.as_arrays()
        if self.cfg.mining == "across":
            past = btask < self.current_task
            return bx[past] if past.any() else None
        current = _vcat(batch.x_labeled, batch.x_unlabeled)
        if self.cfg.mining == "within":
            return current if len(current) else None
        if self.cfg.mining == "agnostic":
            pool = _vcat(current, bx) if len(bx) else current
            return pool if len(pool) else None
        raise ConfigurationError(f"unknown mining mode {self.cfg.mining!r}")

    def _unsup_mining_grad(self, batch, bd):
        anchors = batch.x_unlabeled
        if not self.cfg.use_unsup_mining or len(anchors) == 0:
            bd.flags["l_um_inactive"] = True
            return None
        pool = self._negative_pool(batch)
        if pool is None:
            bd.flags["l_um_inactive"] = True
            return None
        negatives = pool[self.rng.integers(0, len(pool), size=len(anchors))]
        _, a_emb, a_cache = self.net.forward(anchors, return_cache=True)
        _, n_emb, n_cache = self.net.forward(negatives, return_cache=True)
        bd.l_um, da, dn = losses.negative_mining_loss(a_emb, n_emb, self.cfg.alpha)
        zeros_a = np.zeros((len(anchors), self.net.num_classes))
        grad = self.net.backward(a_cache, zeros_a, dembedding=self.cfg.mu * da)
        grad += self.net.backward(n_cache, zeros_a, dembedding=self.cfg.mu * dn)
        return grad

    def _sup_mining_grad(self, batch, bd):
        if not self.cfg.use_sup_mining:
            bd.flags["l_sm_inactive"] = True
            return None
        xb, yb = self.last_step.get("replay", (np.zeros(0), np.zeros(0, dtype=int)))
        anchors_x = _vcat(batch.x_labeled, xb)
        anchors_y = _vcat(batch.y_labeled, yb).astype(int)
        if len(anchors_x) == 0:
            bd.flags["l_sm_inactive"] = True
            return None
        bx, by, _ = self.buffer.as_arrays()
        pool_x = _vcat(batch.x_labeled, bx)
        pool_y = _vcat(batch.y_labeled, by).astype(int)
        a_idx, p_idx, n_idx = [], [], []
        n_stream = len(batch.x_labeled)
        for i in range(len(anchors_x)):
            same = np.flatnonzero(pool_y == anchors_y[i])
            if i < n_stream:
                same = same[same != i]   # a stream anchor is its own pool entry
            diff = np.flatnonzero(pool_y != anchors_y[i])
            if len(same) == 0 or len(diff) == 0:
                continue
            a_idx.append(i)
            p_idx.append(self.rng.choice(same))
            n_idx.append(self.rng.choice(diff))
        if not a_idx:
            bd.flags["l_sm_inactive"] = True
            return None
        ax = anchors_x[a_idx]
        px = pool_x[p_idx]
        nx = pool_x[n_idx]
        _, a_emb, a_cache = self.net.forward(ax, return_cache=True)
        _, p_emb, p_cache = self.net.forward(px, return_cache=True)
        _, n_emb, n_cache = self.net.forward(nx, return_cache=True)
        bd.l_sm, da, dp, dn = losses.triplet_mining_loss(
            a_emb, p_emb, n_emb, self.cfg.beta
        )
        zeros = np.zeros((len(ax), self.net.num_classes))
        grad = self.net.backward(a_cache, zeros, dembedding=da)
        grad += self.net.backward(p_cache, zeros, dembedding=dp)
        grad += self.net.backward(n_cache, zeros, dembedding=dn)
        return grad

    def step_ccic(self, batch):
        grad, bd = self._consistency_parts(batch)
        active = len(self.last_step["s"]) or len(self.last_step["u"])
        g_um = self._unsup_mining_grad(batch, bd)
        if g_um is not None:
            grad += g_um
            active = True
        g_sm = self._sup_mining_grad(batch, bd)
        if g_sm is not None:
            grad += g_sm
            active = True
        if active:
            self._apply(grad)
        else:
            bd.flags["noop"] = True
        self._insert_labeled(batch.x_labeled, batch.y_labeled)
        return bd

    # -- inference ----------------------------------------------------------

    def predict(self, x, seen_classes):
        """Class ids for a batch; no task hint, label space = classes seen."""
        if self.cfg.method == "ccic" and self.cfg.use_knn:
            if self.buffer is not None and len(self.buffer):
                return knn_fit_and_predict(self.buffer, self.net, x, self.cfg.knn_k)
            warnings.warn("empty buffer; falling back to logits argmax")
        logits, _ = self.net.forward(x)
        mask = np.full(logits.shape[1], -np.inf)
        mask[list(seen_classes)] = 0.0
        return np.argmax(logits + mask, axis=1)
