"""Small dense/convolutional classifiers with explicit forward and backward passes.

Everything is plain numpy. Networks expose both their logits and a designated
embedding output, parameters live in a single flat vector, and gradients come
back in the same layout so optimizers and finite-difference checks can treat
the model as a black-box function of one parameter vector.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, NonFiniteError, UsageError


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Dense:
    """Affine layer: y = x @ W + b."""

    def __init__(self, n_in, n_out, rng, dtype=np.float64):
        scale = np.sqrt(2.0 / n_in)
        self.W = (rng.standard_normal((n_in, n_out)) * scale).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise ConfigurationError(
                f"dense layer expects (batch, {self.W.shape[0]}), got {x.shape}"
            )
        return x @ self.W + self.b, x

    def backward(self, cache, dout):
        x = cache
        return dout @ self.W.T, [x.T @ dout, dout.sum(axis=0)]


class ReLU:
    """Elementwise rectifier."""

    def params(self):
        return []

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, cache, dout):
        return dout * (cache > 0), []

    @staticmethod
    def kink_margin(cache):
        # Distance of the closest preactivation to the nondifferentiable point.
        return float(np.min(np.abs(cache))) if cache.size else np.inf


class Conv2d:
    """3x3-style convolution, stride 1, zero 'same' padding, odd kernel size."""

    def __init__(self, in_ch, out_ch, ksize, rng, dtype=np.float64):
        if ksize % 2 != 1:
            raise ConfigurationError("conv kernel size must be odd")
        scale = np.sqrt(2.0 / (in_ch * ksize * ksize))
        self.W = (rng.standard_normal((out_ch, in_ch, ksize, ksize)) * scale).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.ksize = ksize

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.W.shape[1]:
            raise ConfigurationError(
                f"conv layer expects (batch, {self.W.shape[1]}, H, W), got {x.shape}"
            )
        n, _, h, w = x.shape
        p = self.ksize // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.zeros((n, self.W.shape[0], h, w), dtype=x.dtype)
        for i in range(self.ksize):
            for j in range(self.ksize):
                patch = xp[:, :, i:i + h, j:j + w]
                out += np.einsum("nchw,oc->nohw", patch, self.W[:, :, i, j])
        out += self.b[None, :, None, None]
        return out, xp

    def backward(self, cache, dout):
        xp = cache
        n, _, hp, wp = xp.shape
        p = self.ksize // 2
        h, w = hp - 2 * p, wp - 2 * p
        dxp = np.zeros_like(xp)
        dW = np.zeros_like(self.W)
        for i in range(self.ksize):
            for j in range(self.ksize):
                patch = xp[:, :, i:i + h, j:j + w]
                dW[:, :, i, j] = np.einsum("nohw,nchw->oc", dout, patch)
                dxp[:, :, i:i + h, j:j + w] += np.einsum(
                    "nohw,oc->nchw", dout, self.W[:, :, i, j]
                )
        db = dout.sum(axis=(0, 2, 3))
        return dxp[:, :, p:p + h, p:p + w], [dW, db]


class MaxPool2d:
    """2x2 max pooling with stride 2; spatial dims must be even."""

    def __init__(self, size=2):
        self.size = size

    def params(self):
        return []

    def _windows(self, x):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ConfigurationError(f"pooling needs dims divisible by {s}, got {x.shape}")
        return (
            x.reshape(n, c, h // s, s, w // s, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // s, w // s, s * s)
        )

    def forward(self, x):
        win = self._windows(x)
        idx = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, cache, dout):
        shape, idx = cache
        n, c, h, w = shape
        s = self.size
        dwin = np.zeros((n, c, h // s, w // s, s * s), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = (
            dwin.reshape(n, c, h // s, w // s, s, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return dx, []

    def margin_from_input(self, x):
        # Gap between the two largest entries of each pooling window.
        win = self._windows(x)
        if win.shape[-1] < 2:
            return np.inf
        top2 = np.partition(win, -2, axis=-1)[..., -2:]
        return float(np.min(top2[..., 1] - top2[..., 0]))


class Flatten:
    def params(self):
        return []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout):
        return dout.reshape(cache), []


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Network:
    """Ordered layer stack mapping inputs to logits plus a feature embedding.

    ``embedding_index`` selects which layer output acts as the embedding;
    ``None`` means the logits themselves (the default used by the contrastive
    losses and the kNN classifier).
    """

    def __init__(self, layers, input_shape, num_classes, embedding_index=None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.embedding_index = embedding_index
        self._train_cache = None

    # -- parameter plumbing -------------------------------------------------

    def _param_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self._param_arrays())

    def get_params(self):
        arrays = self._param_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in arrays])

    def set_params(self, flat):
        offset = 0
        for p in self._param_arrays():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise ConfigurationError(
                f"parameter vector has {flat.size} entries, network needs {offset}"
            )

    # -- forward / backward -------------------------------------------------

    def forward(self, x, return_cache=False):
        x = np.asarray(x)
        if x.ndim == len(self.input_shape):
            x = x[None, ...]
        if x.shape[0] < 1 or x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"expected batch of shape (n, {self.input_shape}), got {x.shape}"
            )
        caches, outputs = [], []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
            outputs.append(out)
        logits = out
        emb = logits if self.embedding_index is None else outputs[self.embedding_index]
        if return_cache:
            return logits, emb, caches
        return logits, emb

    def backward(self, cache, dlogits, dembedding=None):
        """Gradient of a scalar loss w.r.t. the flat parameter vector.

        ``dlogits``/``dembedding`` are the upstream gradients at the two
        network outputs; ``dembedding`` is injected at the embedding layer.
        """
        if cache is None:
            raise UsageError("backward requires the cache from a prior forward pass")
        emb_idx = self.embedding_index
        if emb_idx is None and dembedding is not None:
            dlogits = dlogits + dembedding
            dembedding = None
        d = np.array(dlogits, copy=True)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            if dembedding is not None and i == emb_idx:
                d = d + dembedding
            d, pgrads = self.layers[i].backward(cache[i], d)
            grads[i] = pgrads
        flat = []
        for pgrads, layer in zip(grads, self.layers):
            if layer.params():
                flat.extend(g.ravel() for g in pgrads)
        if not flat:
            return np.zeros(0)
        return np.concatenate(flat)

    # -- convenience single-cache API --------------------------------------

    def forward_training(self, x):
        logits, emb, cache = self.forward(x, return_cache=True)
        self._train_cache = cache
        return logits, emb

    def backward_training(self, dlogits, dembedding=None):
        if self._train_cache is None:
            raise UsageError("backward called without a preceding training forward pass")
        grad = self.backward(self._train_cache, dlogits, dembedding)
        self._train_cache = None
        return grad

    def relu_margin(self, caches):
        """Smallest |preactivation| feeding any rectifier (finite-difference aid)."""
        margin = np.inf
        for layer, cache in zip(self.layers, caches):
            if isinstance(layer, ReLU):
                margin = min(margin, ReLU.kink_margin(cache))
        return margin


def make_mlp(in_dim, hidden, num_classes, rng, dtype=np.float64, embedding="logits"):
    """Two-ish hidden layer perceptron; ``hidden`` is a tuple of widths."""
    layers = []
    prev = in_dim
    last_relu = None
    for width in hidden:
        layers.append(Dense(prev, width, rng, dtype))
        layers.append(ReLU())
        last_relu = len(layers) - 1
        prev = width
    layers.append(Dense(prev, num_classes, rng, dtype))
    emb_idx = None
    if embedding == "penultimate":
        if last_relu is None:
            raise ConfigurationError("penultimate embedding needs a hidden layer")
        emb_idx = last_relu
    elif embedding != "logits":
        raise ConfigurationError(f"unknown embedding choice {embedding!r}")
    return Network(layers, (in_dim,), num_classes, emb_idx)


def make_conv_net(in_shape, channels, num_classes, rng, dtype=np.float64,
                  embedding="logits"):
    """Two-conv-block classifier for small image inputs (C, H, W)."""
    c, h, w = in_shape
    layers = []
    prev = c
    for ch in channels:
        layers.append(Conv2d(prev, ch, 3, rng, dtype))
        layers.append(ReLU())
        layers.append(MaxPool2d(2))
        h //= 2
        w //= 2
        prev = ch
    layers.append(Flatten())
    layers.append(Dense(prev * h * w, num_classes, rng, dtype))
    emb_idx = len(layers) - 2 if embedding == "penultimate" else None
    if embedding not in ("logits", "penultimate"):
        raise ConfigurationError(f"unknown embedding choice {embedding!r}")
    return Network(layers, tuple(in_shape), num_classes, emb_idx)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad):
        _check_finite(grad)
        return theta - self.lr * grad


class Adam:
    kind = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta, grad):
        _check_finite(grad)
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind, lr):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ConfigurationError(f"unknown optimizer kind {kind!r}")


def _check_finite(grad):
    if grad.size and not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient; aborting the run")


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_gradient(fn, theta, eps=1e-5, coords=None):
    """Central finite differences of scalar ``fn`` at ``theta``.

    ``coords`` restricts the check to a subset of coordinates (returned array
    still has full length, with unchecked entries set to NaN).
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.full(theta.size, np.nan)
    index_iter = range(theta.size) if coords is None else coords
    for i in index_iter:
        bump = np.zeros_like(theta)
        bump[i] = eps
        grad[i] = (fn(theta + bump) - fn(theta - bump)) / (2 * eps)
    return grad
