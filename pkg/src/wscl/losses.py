"""Objective components: sharpening, asymmetric mixup, cross-entropy,
consistency, and the two margin-based mining terms.

Every loss returns both its value and the gradient with respect to the
network outputs it consumes, so training code can chain them through the
network's backward pass. Soft targets are always treated as constants
(stop-gradient), matching how they are produced during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError

LOG_CLAMP = 1e-12


def softmax(logits):
    """Row-wise stable softmax."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sharpen(z, tau):
    """Temperature transform z_i^(1/tau) / sum_j z_j^(1/tau).

    For tau < 1 this lowers the entropy of the distribution; tau = 1 is the
    identity. Input entries must be nonnegative and not all zero.
    """
    if tau <= 0:
        raise ConfigurationError(f"sharpening temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0) or not np.all(z.sum(axis=-1) > 0):
        raise ConfigurationError("sharpen expects nonnegative weights with positive sum")
    powered = z ** (1.0 / tau)
    return powered / powered.sum(axis=-1, keepdims=True)


def draw_mixup_coefficient(rng, gamma):
    """Asymmetric mixup weight: zeta' = max(zeta, 1 - zeta), zeta ~ Beta(gamma, gamma)."""
    if gamma <= 0:
        raise ConfigurationError(f"beta parameter must be positive, got {gamma}")
    zeta = rng.beta(gamma, gamma)
    return max(zeta, 1.0 - zeta)


def mixup(x1, x2, coefficient):
    """Convex combination kept at least as close to x1 as to x2."""
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ConfigurationError(f"mixup shape mismatch: {x1.shape} vs {x2.shape}")
    c = np.asarray(coefficient)
    if c.ndim == 1 and x1.ndim > 1:
        c = c.reshape((-1,) + (1,) * (x1.ndim - 1))
    return c * x1 + (1.0 - c) * x2


def cross_entropy_loss(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (value, d_value/d_logits). Probabilities are clamped at
    LOG_CLAMP before the log to keep confident mistakes finite.
    """
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    if n == 0:
        raise ConfigurationError("cross-entropy over an empty set")
    probs = softmax(logits)
    picked = np.clip(probs[np.arange(n), labels], LOG_CLAMP, None)
    value = float(-np.log(picked).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return value, dlogits


def consistency_loss(logits, soft_targets):
    """Mean squared L2 distance between logits and fixed soft targets."""
    logits = np.atleast_2d(logits)
    soft_targets = np.atleast_2d(soft_targets)
    n = logits.shape[0]
    if n == 0:
        raise ConfigurationError("consistency loss over an empty set")
    diff = logits - soft_targets
    value = float((diff ** 2).sum(axis=1).mean())
    return value, 2.0 * diff / n


def pairwise_sq_dist(a, b):
    """Row-wise squared Euclidean distance between matched rows of a and b."""
    return ((a - b) ** 2).sum(axis=1)


def negative_mining_loss(anchor_out, negative_out, alpha):
    """Mean hinge max(alpha - D(anchor, negative), 0) pushing pairs apart.

    D is the squared Euclidean distance between the paired network outputs.
    Returns (value, d/d_anchor_out, d/d_negative_out).
    """
    anchor_out = np.atleast_2d(anchor_out)
    negative_out = np.atleast_2d(negative_out)
    n = anchor_out.shape[0]
    if n == 0:
        raise ConfigurationError("negative mining over an empty set")
    d = pairwise_sq_dist(anchor_out, negative_out)
    active = (alpha - d) > 0
    value = float(np.maximum(alpha - d, 0.0).mean())
    scale = (active.astype(float) / n)[:, None]
    # d(alpha - D)/d_anchor = -2 (anchor - negative)
    da = -2.0 * (anchor_out - negative_out) * scale
    return value, da, -da


def triplet_mining_loss(anchor_out, positive_out, negative_out, beta):
    """Mean triplet hinge max(beta - D(a, n) + D(a, p), 0).

    Returns (value, d/d_anchor, d/d_positive, d/d_negative).
    """
    anchor_out = np.atleast_2d(anchor_out)
    positive_out = np.atleast_2d(positive_out)
    negative_out = np.atleast_2d(negative_out)
    n = anchor_out.shape[0]
    if n == 0:
        raise ConfigurationError("triplet mining over an empty set")
    d_n = pairwise_sq_dist(anchor_out, negative_out)
    d_p = pairwise_sq_dist(anchor_out, positive_out)
    margin = beta - d_n + d_p
    active = margin > 0
    value = float(np.maximum(margin, 0.0).mean())
    scale = (active.astype(float) / n)[:, None]
    dp = 2.0 * (positive_out - anchor_out) * scale
    dn = 2.0 * (anchor_out - negative_out) * scale
    da = -dp - dn
    return value, da, dp, dn


@dataclass
class LossBreakdown:
    """Per-step objective bookkeeping: total = l_s + lam*l_u + l_sm + mu*l_um."""

    l_s: float = 0.0
    l_u: float = 0.0
    l_sm: float = 0.0
    l_um: float = 0.0
    lam: float = 1.0
    mu: float = 1.0
    flags: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.l_s + self.lam * self.l_u + self.l_sm + self.mu * self.l_um
