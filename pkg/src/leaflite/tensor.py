"""Dense NHWC tensor kernels for MobileNetV2 inference and head training.

Conventions: tensors are float32 numpy arrays laid out (batch, height,
width, channels) with channels innermost; convolution is cross-correlation
(no kernel flip); "same" padding follows the ceil-division rule with the
extra pixel on the bottom/right so exported weights align spatially.
Every kernel accumulates in float32 with one fixed summation order, so
results are bit-identical across runs.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ShapeError

# When enabled, every kernel asserts its output is finite.
CHECK_FINITE = os.environ.get("LEAFLITE_DEBUG_FINITE", "") not in ("", "0")

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "batchnorm",
    "relu",
    "relu6",
    "residual_add",
    "global_avg_pool",
    "dense",
    "softmax",
    "same_pad_amounts",
    "conv_output_size",
]


def _f32(x):
    # float32 in production; float64 passes through so high-precision
    # test oracles can drive the same code paths
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float32)


def _maybe_check_finite(out, name):
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        from .errors import NumericError

        raise NumericError(f"{name} produced non-finite values")


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)  # ceil division
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def same_pad_amounts(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding for 'same'; extra pixel goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return before, total - before


def _pad_input(x, kh, kw, stride, padding):
    if padding == "valid":
        return x
    pt, pb = same_pad_amounts(x.shape[1], kh, stride)
    pl, pr = same_pad_amounts(x.shape[2], kw, stride)
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _windows(x, kh, kw, stride):
    # (N, Ho, Wo, C, kh, kw) view over the padded input
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(f"kernel ({kh}, {kw}) larger than padded input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same"):
    """Cross-correlate x (N,H,W,Cin) with w (Kh,Kw,Cin,Cout)."""
    x, w = _f32(x), _f32(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")

    xp = _pad_input(x, kh, kw, stride, padding)
    n = x.shape[0]
    if kh == kw == 1:
        sub = xp[:, ::stride, ::stride, :]
        ho, wo = sub.shape[1], sub.shape[2]
        out = sub.reshape(n * ho * wo, cin) @ w.reshape(cin, cout)
    else:
        win = _windows(xp, kh, kw, stride)
        ho, wo = win.shape[1], win.shape[2]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
        out = cols.reshape(n * ho * wo, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    out = out.reshape(n, ho, wo, cout)
    if b is not None:
        b = _f32(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
        out = out + b
    _maybe_check_finite(out, "conv2d")
    return out


def depthwise_conv2d(x, w, stride: int = 1, padding: str = "same"):
    """Per-channel convolution: x (N,H,W,C), w (Kh,Kw,C), Cout == Cin."""
    x, w = _f32(x), _f32(w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects 4-d input and 3-d kernel, got {x.shape} and {w.shape}")
    kh, kw, c = w.shape
    if x.shape[3] != c:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")

    xp = _pad_input(x, kh, kw, stride, padding)
    win = _windows(xp, kh, kw, stride)
    out = np.einsum("nhwckl,klc->nhwc", win, w, dtype=np.float32)
    _maybe_check_finite(out, "depthwise_conv2d")
    return out


def batchnorm(x, gamma, beta, mean, var, eps: float = 1e-3):
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel."""
    x = _f32(x)
    c = x.shape[-1]
    gamma, beta, mean, var = (_f32(a).reshape(-1) for a in (gamma, beta, mean, var))
    for name, a in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if a.shape != (c,):
            raise ShapeError(f"batchnorm {name} length {a.shape[0]} != channels {c}")
    if np.any(var < 0):
        raise ValueError("batchnorm variance must be non-negative")
    inv = gamma / np.sqrt(var + np.float32(eps))
    out = x * inv + (beta - mean * inv)
    _maybe_check_finite(out, "batchnorm")
    return out


def relu(x):
    return np.maximum(_f32(x), np.float32(0))


def relu6(x):
    return np.minimum(np.maximum(_f32(x), np.float32(0)), np.float32(6))


def residual_add(x, y):
    x, y = _f32(x), _f32(y)
    if x.shape != y.shape:
        raise ShapeError(f"residual_add dims differ: {x.shape} vs {y.shape}")
    return x + y


def global_avg_pool(x):
    """(N,H,W,C) -> (N,1,1,C) spatial mean."""
    x = _f32(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return x.mean(axis=(1, 2), keepdims=True, dtype=x.dtype)


def dense(x, w, b):
    """y = x @ w + b for x (N,F), w (F,U), b (U,)."""
    x, w, b = _f32(x), _f32(w), _f32(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x @ w + b
    _maybe_check_finite(out, "dense")
    return out


def softmax(x):
    """Row-wise softmax with max subtraction for stability."""
    x = _f32(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
