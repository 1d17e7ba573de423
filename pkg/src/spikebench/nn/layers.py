"""Layer specifications and their numpy forward/backward kernels.

Activations use NCHW layout. Conv weights are ``(filters, channels, k, k)``;
dense weights are ``(in, out)``. Every kernel works in the dtype of its input,
so the same code serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

KINDS = ("dense", "conv2d", "avgpool", "maxpool", "flatten", "dropout", "relu", "tanh", "softmax")
PARAM_KINDS = ("dense", "conv2d")
ACTIVATIONS = ("relu", "tanh", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    units: int | None = None
    filters: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: str = "valid"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.kernel not in (3, 5):
                raise ValueError(f"{self.name}: conv kernel size must be 3 or 5")
            if not self.filters or self.filters < 1:
                raise ValueError(f"{self.name}: conv needs a positive filter count")
            if self.padding not in ("valid", "same"):
                raise ValueError(f"{self.name}: padding must be 'valid' or 'same'")
        if self.kind == "dense" and (not self.units or self.units < 1):
            raise ValueError(f"{self.name}: dense needs a positive unit count")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"{self.name}: dropout rate must be in [0, 1)")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Per-sample output shape for ``in_shape`` (no batch axis)."""
    k = spec.kind
    if k == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {in_shape}", spec.name)
        return (spec.units,)
    if k == "conv2d":
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects (C, H, W), got {in_shape}", spec.name)
        _, h, w = in_shape
        pad = conv_padding(spec)
        ho = (h + 2 * pad - spec.kernel) // spec.stride + 1
        wo = (w + 2 * pad - spec.kernel) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {in_shape} too small for a {spec.kernel}x{spec.kernel} kernel", spec.name)
        return (spec.filters, ho, wo)
    if k in ("avgpool", "maxpool"):
        if len(in_shape) != 3:
            raise ShapeError(f"{k} expects (C, H, W), got {in_shape}", spec.name)
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"input {in_shape} too small to pool", spec.name)
        return (c, h // 2, w // 2)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    return tuple(in_shape)


def param_shapes(spec: LayerSpec, in_shape: tuple):
    if spec.kind == "dense":
        return (in_shape[0], spec.units), (spec.units,)
    if spec.kind == "conv2d":
        return (spec.filters, in_shape[0], spec.kernel, spec.kernel), (spec.filters,)
    return None


def conv_padding(spec: LayerSpec) -> int:
    return (spec.kernel - 1) // 2 if spec.padding == "same" else 0


# ---------------------------------------------------------------------------
# Kernels. forward(...) -> (y, cache); backward(...) -> (dx, grads)


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, (ho, wo), x.shape


def conv_forward(x, W, b, stride=1, pad=0):
    f, _, k, _ = W.shape
    cols, (ho, wo), padded_shape = _im2col(x, k, stride, pad)
    y = cols @ W.reshape(f, -1).T + b
    y = y.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, padded_shape, x.shape, stride, pad)


def conv_backward(dy, W, cache):
    cols, padded_shape, in_shape, stride, pad = cache
    f, c, k, _ = W.shape
    n, _, ho, wo = dy.shape
    dyr = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dW = (dyr.T @ cols).reshape(W.shape)
    db = dyr.sum(axis=0)
    dcols = (dyr @ W.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp, dW, db


def avgpool_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    y = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))
    return y, x.shape


def avgpool_backward(dy, in_shape):
    n, c, ho, wo = dy.shape
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, :2 * ho, :2 * wo] = np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * dy.dtype.type(0.25)
    return dx


def maxpool_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (arg, x.shape)


def maxpool_backward(dy, cache):
    arg, in_shape = cache
    n, c, ho, wo = dy.shape
    onehot = np.zeros((n, c, ho, wo, 4), dtype=dy.dtype)
    np.put_along_axis(onehot, arg[..., None], dy[..., None], axis=-1)
    blocks = onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, :2 * ho, :2 * wo] = blocks
    return dx


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dy, p):
    return p * (dy - (dy * p).sum(axis=1, keepdims=True))


def layer_forward(spec: LayerSpec, params, x, training=False, rng=None):
    k = spec.kind
    if k == "dense":
        W, b = params
        return x @ W + b, x
    if k == "conv2d":
        W, b = params
        return conv_forward(x, W, b, spec.stride, conv_padding(spec))
    if k == "avgpool":
        return avgpool_forward(x)
    if k == "maxpool":
        return maxpool_forward(x)
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if k == "dropout":
        if not training or spec.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"{spec.name}: dropout in training mode needs a random generator")
        keep = 1.0 - spec.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * mask, mask
    if k == "relu":
        return np.maximum(x, 0), x > 0
    if k == "tanh":
        y = np.tanh(x)
        return y, y
    if k == "softmax":
        p = softmax(x)
        return p, p
    raise ValueError(k)


def layer_backward(spec: LayerSpec, params, cache, dy):
    """Return ``(dx, grads)`` where grads is ``(dW, db)`` or ``None``."""
    k = spec.kind
    if k == "dense":
        W, _ = params
        x = cache
        return dy @ W.T, (x.T @ dy, dy.sum(axis=0))
    if k == "conv2d":
        W, _ = params
        dx, dW, db = conv_backward(dy, W, cache)
        return dx, (dW, db)
    if k == "avgpool":
        return avgpool_backward(dy, cache), None
    if k == "maxpool":
        return maxpool_backward(dy, cache), None
    if k == "flatten":
        return dy.reshape(cache), None
    if k == "dropout":
        return (dy if cache is None else dy * cache), None
    if k == "relu":
        return dy * cache, None
    if k == "tanh":
        return dy * (1 - cache * cache), None
    if k == "softmax":
        return softmax_backward(dy, cache), None
    raise ValueError(k)
