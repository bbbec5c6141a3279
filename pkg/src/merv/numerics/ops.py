"""Dense tensor operations used by the projection and fusion stages.

Tensors are plain ``numpy.ndarray`` objects. Every op preserves the floating
dtype of its input, so float32 storage and the float64 verification path run
through the same code.
"""
import numpy as np

from ..errors import DimensionError
from . import kernels

__all__ = [
    "tensor",
    "matmul",
    "softmax",
    "softmax_backward",
    "adaptive_avg_pool2d",
    "adaptive_avg_pool3d",
    "adaptive_avg_pool_backward",
    "mean_over_axis",
    "linear",
    "linear_backward",
    "conv3d_simple",
    "layer_norm",
    "gelu",
]


def tensor(data, shape=None, dtype=np.float32, checked=True):
    """Build a contiguous tensor, rejecting non-finite values when ``checked``."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise DimensionError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _float(x):
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    return np.ascontiguousarray(x)


def matmul(a, b):
    a, b = _float(a), _float(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(v, axis=-1):
    v = _float(v)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p, grad, axis=-1):
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (grad - np.sum(grad * p, axis=axis, keepdims=True))


def _check_pool(x, t, h, w):
    if x.ndim != 4:
        raise DimensionError(f"pooling expects (t, h, w, d), got shape {x.shape}")
    T, H, W, _ = x.shape
    for name, target, source in (("t", t, T), ("h", h, H), ("w", w, W)):
        if not 1 <= target <= source:
            raise DimensionError(f"pool target {name}={target} outside [1, {source}]")


def adaptive_avg_pool2d(x, h, w):
    """Per-frame adaptive mean pool of a (t, h_e, w_e, d) grid to (t, h, w, d).

    Output cell ``i`` along an axis of length ``n`` pooled to ``m`` averages
    input positions ``[floor(i*n/m), ceil((i+1)*n/m))``.
    """
    x = _float(x)
    _check_pool(x, x.shape[0] if x.ndim == 4 else 1, h, w)
    return kernels.active.pool_forward(x, x.shape[0], h, w)


def adaptive_avg_pool3d(x, t, h, w):
    x = _float(x)
    _check_pool(x, t, h, w)
    return kernels.active.pool_forward(x, t, h, w)


def adaptive_avg_pool_backward(grad, in_shape):
    """Gradient of either adaptive pool w.r.t. its input of shape ``in_shape``."""
    grad = _float(grad)
    T, H, W, _ = in_shape
    return kernels.active.pool_backward(grad, T, H, W)


def mean_over_axis(x, axis):
    x = _float(x)
    return np.mean(x, axis=axis, dtype=np.float64).astype(x.dtype)


def linear(x, weight, bias=None):
    x, weight = _float(x), _float(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"cannot apply {weight.shape} weight to input {x.shape}")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def linear_backward(x, weight, grad):
    """Return (grad_x, grad_weight, grad_bias) for ``y = x @ weight + bias``."""
    k, n = weight.shape
    gx = grad @ weight.T
    gw = x.reshape(-1, k).T @ grad.reshape(-1, n)
    gb = grad.reshape(-1, n).sum(axis=0)
    return gx, gw, gb


def _pads(padding):
    if np.isscalar(padding):
        return ((int(padding),) * 2,) * 3
    out = []
    for p in padding:
        out.append((int(p), int(p)) if np.isscalar(p) else (int(p[0]), int(p[1])))
    if len(out) != 3:
        raise DimensionError(f"padding needs three axes, got {padding!r}")
    return tuple(out)


def conv3d_simple(x, kernel, stride=1, padding=0):
    """Direct 3D cross-correlation of (t, h, w, d_in) with (kt, kh, kw, d_in, d_out).

    ``padding`` is an int, three ints, or three (before, after) pairs of zeros.
    """
    x, kernel = _float(x), _float(kernel).astype(_float(x).dtype)
    if x.ndim != 4 or kernel.ndim != 5:
        raise DimensionError(f"conv3d expects rank 4 input and rank 5 kernel, got {x.shape}, {kernel.shape}")
    if kernel.shape[3] != x.shape[3]:
        raise DimensionError(f"kernel expects {kernel.shape[3]} input channels, input has {x.shape[3]}")
    stride = (int(stride),) * 3 if np.isscalar(stride) else tuple(int(s) for s in stride)
    pads = _pads(padding)
    out_shape = []
    for n, k, s, (p0, p1) in zip(x.shape[:3], kernel.shape[:3], stride, pads):
        extent = (n + p0 + p1 - k) // s + 1
        if extent < 1:
            raise DimensionError(f"kernel {kernel.shape[:3]} does not fit padded input {x.shape[:3]}")
        out_shape.append(extent)
    out = np.empty((*out_shape, kernel.shape[4]), dtype=x.dtype)
    return kernels.active.conv3d_into(
        np.ascontiguousarray(x), np.ascontiguousarray(kernel), out, stride, tuple(p[0] for p in pads)
    )


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x):
    # tanh approximation, matching torch's approximate="tanh"
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))
