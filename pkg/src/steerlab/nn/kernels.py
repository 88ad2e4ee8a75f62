"""Compiled matmul kernels with a fixed accumulation order.

BLAS reorders and fuses the inner product (FMA), so its float32 results are
not reproducible across machines. These kernels accumulate each output
element in ascending k order with separate multiply and add roundings, which
makes them bit-identical to a naive triple loop.
"""
from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _mm2d(a, b, out):
    # rows are processed four at a time to reuse each loaded row of b; every
    # output element still sums its k products strictly in ascending order
    m, k = a.shape
    n = b.shape[1]
    acc = np.empty((4, n), a.dtype)
    i = 0
    while i + 4 <= m:
        acc[:] = 0.0
        for p in range(k):
            a0 = a[i, p]
            a1 = a[i + 1, p]
            a2 = a[i + 2, p]
            a3 = a[i + 3, p]
            for j in range(n):
                bj = b[p, j]
                acc[0, j] = acc[0, j] + a0 * bj
                acc[1, j] = acc[1, j] + a1 * bj
                acc[2, j] = acc[2, j] + a2 * bj
                acc[3, j] = acc[3, j] + a3 * bj
        for r in range(4):
            for j in range(n):
                out[i + r, j] = acc[r, j]
        i += 4
    while i < m:
        for j in range(n):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] = out[i, j] + aip * b[p, j]
        i += 1


@numba.njit(cache=True, nogil=True)
def _mm3d(a, b, out):
    for s in range(a.shape[0]):
        _mm2d(a[s], b[s], out[s])


def matmul2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    _mm2d(a, b, out)
    return out


def matmul3d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    _mm3d(a, b, out)
    return out


@numba.njit(cache=True, nogil=True)
def _softmax_rows(x, out):
    rows, n = x.shape
    buf = np.empty(n, np.float64)
    for r in range(rows):
        m = np.float64(x[r, 0])
        for j in range(1, n):
            if x[r, j] > m:
                m = np.float64(x[r, j])
        s = 0.0
        for j in range(n):
            e = math.exp(np.float64(x[r, j]) - m)
            buf[j] = e
            s += e
        for j in range(n):
            out[r, j] = buf[j] / s


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    _softmax_rows(flat, out)
    return out.reshape(x.shape)


@numba.njit(cache=True, nogil=True)
def _gelu(x, y, th, c):
    # tanh-approximate GELU, elementwise in float64
    for i in range(x.size):
        v = np.float64(x[i])
        u = c * (v + 0.044715 * v * v * v)
        u = min(max(u, -20.0), 20.0)
        t = 1.0 - 2.0 / (math.exp(2.0 * u) + 1.0)
        th[i] = t
        y[i] = 0.5 * v * (1.0 + t)


@numba.njit(cache=True, nogil=True)
def _gelu_grad(x, th, out, c):
    for i in range(x.size):
        v = np.float64(x[i])
        dinner = c * (1.0 + 3 * 0.044715 * v * v)
        t = th[i]
        out[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner


def gelu(x: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    th = np.empty(x.shape, np.float64)
    _gelu(x.reshape(-1), y.reshape(-1), th.reshape(-1), c)
    return y, th


def gelu_grad(x: np.ndarray, th: np.ndarray, c: float) -> np.ndarray:
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _gelu_grad(x.reshape(-1), np.ascontiguousarray(th).reshape(-1), out.reshape(-1), c)
    return out

