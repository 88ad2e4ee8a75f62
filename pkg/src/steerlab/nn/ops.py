"""Forward-only tensor operations.

Tensors are C-contiguous float32 ``numpy`` arrays. Every public op checks its
output for NaN/Inf and raises :class:`NumericError` rather than letting it
propagate. Transcendentals (exp, tanh) are evaluated in float64 and rounded
back, which keeps float32 outputs stable across SIMD code paths.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError
from . import kernels

DTYPE = np.float32
LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of [m,k]x[k,n], or batched [s,m,k]x[s,k,n]."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
        out = kernels.matmul2d(a, b)
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"batched matmul shapes differ: {a.shape} x {b.shape}")
        out = kernels.matmul3d(a, b)
    else:
        raise ShapeError(f"matmul expects two 2-D or two 3-D arrays, got {a.shape} x {b.shape}")
    return check_finite(out, "matmul")


def exp(x: np.ndarray) -> np.ndarray:
    return np.exp(x.astype(np.float64)).astype(x.dtype)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    check_finite(x, "softmax input")
    return kernels.softmax_rows(x)


def layer_norm_parts(x: np.ndarray, eps: float = LN_EPS) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(x.dtype)
    return xc * inv, inv


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shape must be ({d},), got {gain.shape}/{bias.shape}")
    xhat, _ = layer_norm_parts(x, eps)
    return check_finite(xhat * gain + bias, "layer_norm")


def gelu_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximate GELU and the tanh term (needed by the backward rule)."""
    return kernels.gelu(x, _GELU_C)


def gelu(x: np.ndarray) -> np.ndarray:
    return check_finite(gelu_parts(x)[0], "gelu")


def gelu_grad(x: np.ndarray, th: np.ndarray) -> np.ndarray:
    return kernels.gelu_grad(x, th, _GELU_C)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    z = x64 - x64.max(axis=-1, keepdims=True)
    return (z - np.log(np.exp(z).sum(axis=-1, keepdims=True))).astype(x.dtype)


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """[B,C,H,W] -> [B*Ho*Wo, C*k*k] patches (channel-major within a patch)."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, ho, wo, c, k, k), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, :, di, dj] = xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * k * k)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back (fixed di, dj order)."""
    b, c, h, w = shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(b, ho, wo, c, k, k)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return xp[:, :, pad : pad + h, pad : pad + w]
