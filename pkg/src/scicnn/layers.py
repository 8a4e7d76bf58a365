"""Layers with hand-written forward and backward passes.

Every layer works on mini-batches (leading batch axis). The functional
wrappers at the bottom of the module also accept a single unbatched sample.

Padding mode ``"same"`` follows the usual half-padding rule: the output
spatial size is ``ceil(size / stride)`` and the total padding
``max((out - 1) * stride + k - size, 0)`` is split with the smaller half
before and the larger half after.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidHyperparameterError, InvalidLabelError, ShapeError
from .tensor import TRAIN_DTYPE, Rng

PADDING_MODES = ("same", "valid")


def output_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out_size, pad_before, pad_after)`` for one spatial axis."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise ShapeError(f"valid padding needs spatial size >= {k}, got {size}")
        return (size - k) // stride + 1, 0, 0
    raise ShapeError(f"unknown padding mode {padding!r}")


class Layer:
    """Base class. Parameterized layers fill ``params`` and ``grads``."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape

    def clear_cache(self):
        for attr in list(vars(self)):
            if attr.startswith("_cache"):
                setattr(self, attr, None)


class Conv2D(Layer):
    """3x3 convolution (cross-correlation) with stride and padding.

    The kernel flip of a true convolution is absorbed by the learned weights;
    ``conv_reference`` in the tests evaluates the flipped-kernel form.
    """

    name = "conv"

    def __init__(self, in_channels, out_channels, stride=2, padding="same", kernel_size=3,
                 dtype=TRAIN_DTYPE):
        super().__init__()
        if padding not in PADDING_MODES:
            raise ShapeError(f"unknown padding mode {padding!r}")
        if stride < 1:
            raise ShapeError(f"stride must be >= 1, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        self.k = kernel_size
        self.params["kernels"] = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype)
        self.params["bias"] = np.zeros(out_channels, dtype)
        self._cache = None

    @property
    def kernels(self):
        return self.params["kernels"]

    @property
    def bias(self):
        return self.params["bias"]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        oh = output_geometry(h, self.k, self.stride, self.padding)[0]
        ow = output_geometry(w, self.k, self.stride, self.padding)[0]
        return (self.out_channels, oh, ow)

    def _pad(self, x):
        _, _, h, w = x.shape
        oh, ht, hb = output_geometry(h, self.k, self.stride, self.padding)
        ow, wl, wr = output_geometry(w, self.k, self.stride, self.padding)
        xpad = np.pad(x, ((0, 0), (0, 0), (ht, hb), (wl, wr))) if ht + hb + wl + wr else x
        return xpad, (oh, ow), (ht, wl)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv expects [B, {self.in_channels}, H, W], got {list(x.shape)}")
        b, c = x.shape[:2]
        xpad, (oh, ow), offsets = self._pad(x)
        # cols[(c, m, n), (b, i, j)] = xpad[b, c, i*s + m, j*s + n]
        cols = np.empty((c, self.k, self.k, b, oh, ow), dtype=x.dtype)
        s = self.stride
        for m in range(self.k):
            for n in range(self.k):
                cols[:, m, n] = xpad[:, :, m:m + s * oh:s, n:n + s * ow:s].transpose(1, 0, 2, 3)
        cols = cols.reshape(c * self.k * self.k, -1)
        y = self.kernels.reshape(self.out_channels, -1) @ cols
        y += self.bias[:, None]
        self._cache = (x.shape, xpad.shape, cols, (oh, ow), offsets)
        return np.ascontiguousarray(y.reshape(self.out_channels, b, oh, ow).transpose(1, 0, 2, 3))

    def backward(self, grad_out):
        if self._cache is None:
            raise ShapeError("conv backward called before forward")
        in_shape, pad_shape, cols, (oh, ow), (top, left) = self._cache
        b, c = in_shape[:2]
        if grad_out.shape != (b, self.out_channels, oh, ow):
            raise ShapeError(f"grad_out shape {list(grad_out.shape)} does not match "
                             f"conv output {[b, self.out_channels, oh, ow]}")
        g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(self.out_channels, -1)
        kmat = self.kernels.reshape(self.out_channels, -1)
        self.grads["kernels"] = (g @ cols.T).reshape(self.kernels.shape)
        self.grads["bias"] = g.sum(axis=1)
        dcols = (kmat.T @ g).reshape(c, self.k, self.k, b, oh, ow)
        dxpad = np.zeros(pad_shape, dtype=grad_out.dtype)
        s = self.stride
        for m in range(self.k):
            for n in range(self.k):
                dxpad[:, :, m:m + s * oh:s, n:n + s * ow:s] += dcols[:, m, n].transpose(1, 0, 2, 3)
        return dxpad[:, :, top:top + in_shape[2], left:left + in_shape[3]]


class Activation(Layer):
    """ReLU or Leaky ReLU. The gradient at exactly 0 takes the x >= 0 branch."""

    name = "act"
    KINDS = ("relu", "leaky_relu")

    def __init__(self, kind="leaky_relu", alpha=0.01):
        super().__init__()
        if kind not in self.KINDS:
            raise InvalidHyperparameterError(f"unknown activation {kind!r}")
        if not 0 <= alpha < 1:
            raise InvalidHyperparameterError(f"alpha must lie in [0, 1), got {alpha}")
        self.kind = kind
        self.alpha = alpha if kind == "leaky_relu" else 0.0
        self._cache = None

    def forward(self, x, training=False, rng=None):
        self._cache = x
        if self.alpha == 0:
            return np.maximum(x, 0)
        # max(x, a*x) == leaky relu for 0 <= a < 1
        return np.maximum(x, x * x.dtype.type(self.alpha))

    def backward(self, grad_out):
        x = self._cache
        if x is None or grad_out.shape != x.shape:
            raise ShapeError("activation backward shape mismatch")
        return np.where(x >= 0, grad_out, grad_out * grad_out.dtype.type(self.alpha))


class MaxPool2D(Layer):
    """3x3 max pooling; ties go to the first window position in row-major order."""

    name = "pool"

    def __init__(self, window=3, stride=2, padding="same"):
        super().__init__()
        if padding not in PADDING_MODES:
            raise ShapeError(f"unknown padding mode {padding!r}")
        self.k = window
        self.stride = stride
        self.padding = padding
        self._cache = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, output_geometry(h, self.k, self.stride, self.padding)[0],
                output_geometry(w, self.k, self.stride, self.padding)[0])

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"pool expects [B, C, H, W], got {list(x.shape)}")
        _, _, h, w = x.shape
        oh, ht, hb = output_geometry(h, self.k, self.stride, self.padding)
        ow, wl, wr = output_geometry(w, self.k, self.stride, self.padding)
        b, c = x.shape[:2]
        hp, wp = h + ht + hb, w + wl + wr
        xpad = np.full((b, c, hp, wp), -np.inf, dtype=x.dtype)
        xpad[:, :, ht:ht + h, wl:wl + w] = x
        s, kk = self.stride, self.k * self.k
        win = np.empty((kk, b, c, oh, ow), dtype=x.dtype)
        for idx in range(kk):
            m, n = divmod(idx, self.k)
            win[idx] = xpad[:, :, m:m + s * oh:s, n:n + s * ow:s]
        best = win.max(axis=0)
        # earliest row-major window position holding the maximum
        arg = np.full(best.shape, kk - 1, dtype=np.int64)
        for idx in range(kk - 2, -1, -1):
            np.putmask(arg, win[idx] == best, idx)
        m, n = np.divmod(arg, self.k)
        rows = np.arange(oh).reshape(1, 1, oh, 1) * s + m
        cols = np.arange(ow).reshape(1, 1, 1, ow) * s + n
        planes = np.arange(b * c).reshape(b, c, 1, 1) * (hp * wp)
        self._cache = (x.shape, (b, c, hp, wp), planes + rows * wp + cols, (ht, wl))
        return best

    def backward(self, grad_out):
        if self._cache is None:
            raise ShapeError("pool backward called before forward")
        in_shape, pad_shape, flat, (top, left) = self._cache
        if grad_out.shape != flat.shape:
            raise ShapeError(f"grad_out shape {list(grad_out.shape)} does not match "
                             f"pool output {list(flat.shape)}")
        dxpad = np.bincount(flat.ravel(), weights=grad_out.ravel(), minlength=int(np.prod(pad_shape)))
        dxpad = dxpad.reshape(pad_shape).astype(grad_out.dtype, copy=False)
        return dxpad[:, :, top:top + in_shape[2], left:left + in_shape[3]]


class Flatten(Layer):
    name = "flatten"

    def __init__(self):
        super().__init__()
        self._cache = None

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cache)


class Dense(Layer):
    """Fully connected layer, ``y = W x + b``."""

    name = "fc"

    def __init__(self, in_dim, out_dim, dtype=TRAIN_DTYPE):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params["weights"] = np.zeros((out_dim, in_dim), dtype)
        self.params["bias"] = np.zeros(out_dim, dtype)
        self._cache = None

    @property
    def weights(self):
        return self.params["weights"]

    @property
    def bias(self):
        return self.params["bias"]

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_dim:
            raise ShapeError(f"fc expects input size {self.in_dim}, got {list(in_shape)}")
        return (self.out_dim,)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"fc expects [B, {self.in_dim}], got {list(x.shape)}")
        self._cache = x
        return x @ self.weights.T + self.bias

    def backward(self, grad_out):
        x = self._cache
        if x is None or grad_out.shape != (x.shape[0], self.out_dim):
            raise ShapeError("fc backward shape mismatch")
        self.grads["weights"] = grad_out.T @ x
        self.grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.weights


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/p during training."""

    name = "dropout"

    def __init__(self, keep_prob=0.5):
        super().__init__()
        if not 0 < keep_prob <= 1:
            raise InvalidHyperparameterError(f"keep probability must lie in (0, 1], got {keep_prob}")
        self.p = keep_prob
        self._cache = None

    def forward(self, x, training=False, rng=None, mask=None):
        if not training or self.p == 1:
            self._cache = None
            return x
        if mask is None:
            if rng is None:
                raise InvalidHyperparameterError("training-mode dropout needs an Rng")
            keep = rng.uniform(x.shape, 0.0, 1.0, dtype=np.float64) < self.p
            mask = keep.astype(x.dtype) * x.dtype.type(1.0 / self.p)
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        if self._cache is None:
            return grad_out
        return grad_out * self._cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Return ``(probs, mean_loss, grad_logits)``.

    Accepts ``logits`` of shape [N] with an integer label, or [B, N] with a
    label vector; the batched gradient is that of the mean loss.
    """
    single = np.ndim(logits) == 1
    logits2 = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n = logits2.shape[1]
    if labels.shape[0] != logits2.shape[0]:
        raise ShapeError("one label per row of logits is required")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InvalidLabelError(f"labels must lie in [0, {n}), got {labels.tolist()}")
    z = logits2 - logits2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    rows = np.arange(logits2.shape[0])
    loss = float(-logp[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= logits2.shape[0]
    if single:
        return probs[0], loss, grad[0]
    return probs, loss, grad


def _batched(fn, x, *args, **kwargs):
    if x.ndim in (1, 3):
        out = fn(x[None], *args, **kwargs)
        return out[0]
    return fn(x, *args, **kwargs)


# functional interface; single samples ([C, H, W] or [D]) are accepted too

def conv_forward(layer: Conv2D, x):
    if x.ndim == 3 and x.shape[0] != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} channels, got {x.shape[0]}")
    return _batched(layer.forward, x)


def conv_backward(layer: Conv2D, x, grad_out):
    single = x.ndim == 3
    conv_forward(layer, x)
    if single:
        if grad_out.ndim != 3:
            raise ShapeError("grad_out must match the unbatched conv output")
        grad_out = grad_out[None]
    gx = layer.backward(grad_out)
    return (gx[0] if single else gx), layer.grads["kernels"], layer.grads["bias"]


def activation_forward(act: Activation, x):
    return act.forward(x)


def activation_backward(act: Activation, x, grad_out):
    act.forward(x)
    return act.backward(grad_out)


def maxpool_forward(layer: MaxPool2D, x):
    return _batched(layer.forward, x)


def maxpool_backward(layer: MaxPool2D, x, grad_out):
    single = x.ndim == 3
    maxpool_forward(layer, x)
    gx = layer.backward(grad_out[None] if single else grad_out)
    return gx[0] if single else gx


def fc_forward(layer: Dense, x):
    return _batched(layer.forward, x)


def fc_backward(layer: Dense, x, grad_out):
    single = x.ndim == 1
    fc_forward(layer, x)
    gx = layer.backward(grad_out[None] if single else grad_out)
    return (gx[0] if single else gx), layer.grads["weights"], layer.grads["bias"]


def dropout_forward(layer: Dropout, x, training: bool, rng: Rng | None = None):
    return layer.forward(x, training=training, rng=rng)


def dropout_backward(layer: Dropout, grad_out):
    return layer.backward(grad_out)


def he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)
