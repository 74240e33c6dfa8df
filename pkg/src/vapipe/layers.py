"""Feed-forward layers of the frame CNN, each with an explicit backward pass.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout (batch, channel,
row, column). Every function is dtype-agnostic: training runs at float32 and
the gradient-check suite runs the same code at float64.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, check_shape

LAYER_KINDS = (
    "batchnorm", "conv2d", "relu", "maxpool2x2", "quadrantpool", "dense", "dropout", "softmax",
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

# Upper bound on the im2col buffer, in elements; batches are chunked to fit.
_IM2COL_BUDGET = 1 << 23


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    filters: int = 0
    units: int = 0
    drop_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.kernel < 1 or self.kernel % 2 == 0 or self.filters < 1):
            raise ValueError("conv2d needs an odd kernel and at least one filter")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs units >= 1")
        if self.kind == "dropout" and not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must be in [0, 1)")


def glorot_limit(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(spec: LayerSpec, in_dim: int, seed, dtype=np.float32) -> dict:
    """Glorot-uniform weights and zero biases for one layer.

    ``in_dim`` is the input channel count for conv2d and the input width for
    dense. Batchnorm gets unit scale, zero shift and identity running stats;
    parameter-free layers return an empty dict.
    """
    rng = np.random.default_rng(seed)
    if spec.kind == "conv2d":
        k = spec.kernel
        fan_in, fan_out = in_dim * k * k, spec.filters * k * k
        lim = glorot_limit(fan_in, fan_out)
        w = rng.uniform(-lim, lim, size=(spec.filters, in_dim, k, k))
        return {"w": w.astype(dtype), "b": np.zeros(spec.filters, dtype)}
    if spec.kind == "dense":
        lim = glorot_limit(in_dim, spec.units)
        w = rng.uniform(-lim, lim, size=(spec.units, in_dim))
        return {"w": w.astype(dtype), "b": np.zeros(spec.units, dtype)}
    if spec.kind == "batchnorm":
        return {
            "gamma": np.ones(in_dim, dtype),
            "beta": np.zeros(in_dim, dtype),
            "running_mean": np.zeros(in_dim, dtype),
            "running_var": np.ones(in_dim, dtype),
        }
    return {}


# -- convolution ------------------------------------------------------------

def _correlate_same(x, w, b):
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wmat = w.reshape(F, C * k * k).T
    out = np.empty((B, H, W, F), dtype=np.result_type(x, w))
    step = max(1, _IM2COL_BUDGET // max(1, H * W * C * k * k))
    for s in range(0, B, step):
        cols = sliding_window_view(xp[s:s + step], (k, k), axis=(2, 3))
        n = cols.shape[0]
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * H * W, C * k * k)
        out[s:s + n] = (cols @ wmat).reshape(n, H, W, F)
    out += b
    return out.transpose(0, 3, 1, 2)


def _check_conv(x, w, b=None):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input: expected rank 4 (B,C,H,W), got shape {x.shape}")
    check_shape("conv2d weight", w.shape, (None, x.shape[1], None, None))
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d weight: expected square odd kernel, got shape {w.shape}")
    if b is not None:
        check_shape("conv2d bias", b.shape, (w.shape[0],))


def conv2d_forward(x, w, b):
    """Stride-1 cross-correlation with zero "same" padding, plus bias."""
    _check_conv(x, w, b)
    return np.ascontiguousarray(_correlate_same(x, w, b))


def conv2d_backward(grad_out, x, w):
    """Returns ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    _check_conv(x, w)
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    check_shape("conv2d grad_out", grad_out.shape, (B, F, H, W))
    pad = (k - 1) // 2
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # input gradient is a same-padded correlation with the flipped, transposed kernel
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = _correlate_same(grad_out, w_flip, np.zeros(C, dtype=w.dtype))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    g = grad_out.transpose(0, 2, 3, 1)
    grad_w = np.zeros((F, C * k * k), dtype=np.result_type(x, w, grad_out))
    step = max(1, _IM2COL_BUDGET // max(1, H * W * C * k * k))
    for s in range(0, B, step):
        cols = sliding_window_view(xp[s:s + step], (k, k), axis=(2, 3))
        n = cols.shape[0]
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * H * W, C * k * k)
        grad_w += g[s:s + n].reshape(n * H * W, F).T @ cols
    return np.ascontiguousarray(grad_x), grad_w.reshape(w.shape), grad_b


# -- activations ------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_out, probs):
    return probs * (grad_out - (grad_out * probs).sum(axis=1, keepdims=True))


# -- pooling ----------------------------------------------------------------

def _check_even(name, x):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank 4 (B,C,H,W), got shape {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{name}: spatial dims must be even, got {x.shape[2:]}")


def maxpool2x2(x):
    """2x2/stride-2 max pooling. Returns ``(out, idx)`` where ``idx`` is the
    row-major position (0..3) of the winner inside each window; ties go to
    the first position."""
    _check_even("maxpool2x2", x)
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(grad_out, idx):
    B, C, h, w = idx.shape
    check_shape("maxpool grad_out", grad_out.shape, (B, C, h, w))
    onehot = np.zeros((B, C, h, w, 4), dtype=grad_out.dtype)
    np.put_along_axis(onehot, idx[..., None], grad_out[..., None], axis=-1)
    onehot = onehot.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return onehot.reshape(B, C, 2 * h, 2 * w)


def quadrant_pool(x):
    """Mean over each of the four equal quadrants -> (B, C, 2, 2)."""
    _check_even("quadrant_pool", x)
    B, C, H, W = x.shape
    return x.reshape(B, C, 2, H // 2, 2, W // 2).mean(axis=(3, 5))


def quadrant_pool_backward(grad_out, in_shape):
    B, C, H, W = in_shape
    check_shape("quadrant_pool grad_out", grad_out.shape, (B, C, 2, 2))
    area = (H // 2) * (W // 2)
    g = (grad_out / area)[:, :, :, None, :, None]
    return np.broadcast_to(g, (B, C, 2, H // 2, 2, W // 2)).reshape(B, C, H, W).copy()


# -- batch normalization ----------------------------------------------------

def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm: expected rank 2 or 4, got shape {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; eval mode reads them. Returns
    ``(out, cache)``.
    """
    axes, bshape = _bn_axes(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * var.astype(running_var.dtype)
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, mode)


def batchnorm_backward(grad_out, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, mode = cache
    axes, bshape = _bn_axes(grad_out)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma.reshape(bshape)
    if mode == "eval":
        return dxhat * inv_std.reshape(bshape), grad_gamma, grad_beta
    n = grad_out.size // grad_out.shape[1]
    grad_x = (inv_std.reshape(bshape) / n) * (
        n * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return grad_x, grad_gamma, grad_beta


# -- dense / dropout --------------------------------------------------------

def dense_forward(x, w, b):
    if x.ndim != 2:
        raise ShapeError(f"dense input: expected rank 2 (B,fan_in), got shape {x.shape}")
    check_shape("dense weight", w.shape, (None, x.shape[1]))
    check_shape("dense bias", b.shape, (w.shape[0],))
    return x @ w.T + b


def dense_backward(grad_out, x, w):
    """Returns ``(grad_x, grad_w, grad_b)``."""
    check_shape("dense grad_out", grad_out.shape, (x.shape[0], w.shape[0]))
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def dropout(x, p=0.5, mode="train", rng=None):
    """Inverted dropout. Returns ``(out, mask)``; the mask already carries the
    ``1/(1-p)`` survivor scale so backward is ``grad * mask``.

    ``rng`` may be a seed or a ``numpy.random.Generator``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x, np.ones_like(x)
    gen = np.random.default_rng(rng)
    mask = (gen.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out * mask

