"""Forward and backward kernels on NCHW arrays.

Every ``*_backward`` returns gradients with respect to the inputs of the
matching forward, in argument order. Kernels follow the dtype of their
inputs, so the same code serves float32 training and float64 gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAKY_SLOPE = 0.2


def _pads(padding) -> tuple[int, int, int, int]:
    """Normalize to (top, bottom, left, right)."""
    if np.isscalar(padding):
        p = int(padding)
        return p, p, p, p
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    return tuple(int(p) for p in padding)


def zero_pad(x: np.ndarray, padding) -> np.ndarray:
    t, b, l, r = _pads(padding)
    if not (t or b or l or r):
        return x
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def zero_pad_backward(dy: np.ndarray, padding) -> np.ndarray:
    t, b, l, r = _pads(padding)
    H, W = dy.shape[2] - t - b, dy.shape[3] - l - r
    return dy[:, :, t:t + H, l:l + W]


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Channel-major patches: shape (B, C*k*k, Ho*Wo)."""
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    col = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo)
    return col, Ho, Wo


def _col2im(dcol: np.ndarray, shape, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Scatter-add (B, C*k*k, Ho*Wo) patches back onto a (B, C, Hp, Wp) grid."""
    B, C, Hp, Wp = shape
    dcol = dcol.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros(shape, dtype=dcol.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += dcol[:, :, i, j]
    return out


def conv_output_size(n: int, k: int, stride: int, pad_total: int) -> int:
    return (n + pad_total - k) // stride + 1


# --- convolution --------------------------------------------------------------

def conv2d(x, w, b, stride: int = 1, padding=0):
    """Cross-correlation. ``w`` has shape (Cout, Cin, k, k). Returns (y, cache)."""
    Co, Ci, k, k2 = w.shape
    if x.ndim != 4 or x.shape[1] != Ci or k != k2:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    xp = zero_pad(x, padding)
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ValueError(f"conv2d output would be empty: padded input {xp.shape[2:]}, kernel {k}")
    col, Ho, Wo = _im2col(xp, k, stride)
    y = np.matmul(w.reshape(Co, -1), col)
    if b is not None:
        y += b.reshape(1, -1, 1)
    return y.reshape(x.shape[0], Co, Ho, Wo), (col, xp.shape, w, stride, padding, Ho, Wo)


def conv2d_backward(dy, cache, need_dx: bool = True, need_dw: bool = True):
    col, xp_shape, w, stride, padding, Ho, Wo = cache
    Co, Ci, k, _ = w.shape
    dyf = dy.reshape(dy.shape[0], Co, Ho * Wo)
    dw = db = dx = None
    if need_dw:
        dw = np.tensordot(dyf, col, axes=([0, 2], [0, 2])).reshape(w.shape)
        db = dyf.sum(axis=(0, 2))
    if need_dx:
        dcol = np.matmul(w.reshape(Co, -1).T, dyf)
        dx = zero_pad_backward(_col2im(dcol, xp_shape, k, stride, Ho, Wo), padding)
    return dx, dw, db


def conv_transpose2d(x, w, b, stride: int = 1, padding: int = 0):
    """Fractionally strided convolution, the adjoint of conv2d.

    ``w`` has shape (Cin, Cout, k, k); output size is (in - 1)*stride + k - 2*padding.
    """
    Ci, Co, k, _ = w.shape
    if x.ndim != 4 or x.shape[1] != Ci:
        raise ValueError(f"conv_transpose2d shape mismatch: x {x.shape}, w {w.shape}")
    B, _, H, W = x.shape
    Hf, Wf = (H - 1) * stride + k, (W - 1) * stride + k
    if Hf - 2 * padding < 1 or Wf - 2 * padding < 1:
        raise ValueError("conv_transpose2d output would be empty")
    xf = x.reshape(B, Ci, H * W)
    full = _col2im(np.matmul(w.reshape(Ci, -1).T, xf), (B, Co, Hf, Wf), k, stride, H, W)
    y = zero_pad_backward(full, padding)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(y), (xf, x.shape, w, stride, padding)


def conv_transpose2d_backward(dy, cache, need_dx: bool = True, need_dw: bool = True):
    xf, x_shape, w, stride, padding = cache
    Ci, Co, k, _ = w.shape
    col, _, _ = _im2col(zero_pad(dy, padding), k, stride)
    dw = db = dx = None
    if need_dw:
        dw = np.tensordot(xf, col, axes=([0, 2], [0, 2])).reshape(w.shape)
        db = dy.sum(axis=(0, 2, 3))
    if need_dx:
        dx = np.matmul(w.reshape(Ci, -1), col).reshape(x_shape)
    return dx, dw, db


# --- padding --------------------------------------------------------------------

def reflect_pad(x, p: int):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


def reflect_pad_backward(dy, p: int):
    H, W = dy.shape[2] - 2 * p, dy.shape[3] - 2 * p
    d = dy[:, :, p:p + H, :].copy()
    for r in range(p):
        d[:, :, p - r] += dy[:, :, r]
        d[:, :, H - 1 - (p - r)] += dy[:, :, H + 2 * p - 1 - r]
    out = d[:, :, :, p:p + W].copy()
    for c in range(p):
        out[:, :, :, p - c] += d[:, :, :, c]
        out[:, :, :, W - 1 - (p - c)] += d[:, :, :, W + 2 * p - 1 - c]
    return out


# --- normalization -------------------------------------------------------------

def _norm_forward(x, gamma, beta, axes, mean=None, var=None):
    if mean is None:
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mean) * inv
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return y, xhat, inv


def _norm_backward(dy, gamma, xhat, inv, axes):
    n = np.prod([dy.shape[a] for a in axes])
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


def batch_norm(x, gamma, beta, running_mean, running_var, train: bool = True):
    """Per-channel normalization over batch and space.

    In train mode the running statistics arrays are updated in place
    with momentum 0.9.
    """
    axes = (0, 2, 3)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean.astype(running_mean.dtype)
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var.astype(running_var.dtype)
        y, xhat, inv = _norm_forward(x, gamma, beta, axes,
                                     mean.reshape(1, -1, 1, 1), var.reshape(1, -1, 1, 1))
        return y, (gamma, xhat, inv, True)
    mean = running_mean.reshape(1, -1, 1, 1).astype(x.dtype)
    var = running_var.reshape(1, -1, 1, 1).astype(x.dtype)
    y, xhat, inv = _norm_forward(x, gamma, beta, axes, mean, var)
    return y, (gamma, xhat, inv, False)


def batch_norm_backward(dy, cache):
    gamma, xhat, inv, train = cache
    if train:
        return _norm_backward(dy, gamma, xhat, inv, (0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    return dy * gamma.reshape(1, -1, 1, 1) * inv, dgamma, dbeta


def instance_norm(x, gamma, beta):
    y, xhat, inv = _norm_forward(x, gamma, beta, (2, 3))
    return y, (gamma, xhat, inv)


def instance_norm_backward(dy, cache):
    gamma, xhat, inv = cache
    return _norm_backward(dy, gamma, xhat, inv, (2, 3))


# --- activations ----------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return np.where(x > 0, x, x * slope)


def leaky_relu_backward(dy, x, slope: float = LEAKY_SLOPE):
    return np.where(x > 0, dy, dy * slope)


def tanh(x):
    return np.tanh(x)


def tanh_backward(dy, y):
    return dy * (1 - y * y)


def sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


def clamp(x, lo: float = 0.0, hi: float = 1.0):
    return np.clip(x, lo, hi)


def clamp_backward(dy, x, lo: float = 0.0, hi: float = 1.0):
    """Gradient passes only where ``x`` lies strictly inside the interval."""
    return dy * ((x > lo) & (x < hi))


# --- resampling -----------------------------------------------------------------

def max_pool2d(x):
    """2x2 max pooling with stride 2; ties route to the first position in raster order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d needs even spatial dims, got {H}x{W}")
    blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (arg, x.shape)


def max_pool2d_backward(dy, cache):
    arg, (B, C, H, W) = cache
    onehot = arg[..., None] == np.arange(4)
    d = (onehot * dy[..., None]).reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return d.reshape(B, C, H, W).astype(dy.dtype, copy=False)


def upsample_nearest(x, factor: int = 2):
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(dy, factor: int = 2):
    B, C, H, W = dy.shape
    return dy.reshape(B, C, H // factor, factor, W // factor, factor).sum(axis=(3, 5))
