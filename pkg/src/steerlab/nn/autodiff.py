"""Tape-based reverse-mode differentiation over a fixed op set.

A :class:`Graph` records one node per op in execution order; ``backward``
walks the tape in exact reverse and accumulates parent gradients in parent
order, so gradients are bit-reproducible. With ``record=False`` the same op
methods run forward-only (used by the samplers).
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ShapeError, ValidationError
from . import ops


class Node:
    __slots__ = ("value", "parents", "backward_fn", "name")

    def __init__(self, value: np.ndarray, parents=(), backward_fn: Callable | None = None, name: str | None = None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.name or ''}{list(self.shape)})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


class Graph:
    def __init__(self, dtype=np.float32, record: bool = True):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- leaves ---------------------------------------------------------------
    def param(self, name: str, value: np.ndarray) -> Node:
        if name in self.params:
            return self.params[name]
        node = Node(ops.as_tensor(value, self.dtype), name=name)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return Node(ops.as_tensor(value, self.dtype))

    def _emit(self, value: np.ndarray, parents, backward_fn) -> Node:
        ops.check_finite(value)
        if not self.record:
            return Node(value)
        node = Node(value, parents, backward_fn)
        self.nodes.append(node)
        return node

    # -- ops --------------------------------------------------------------------
    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        out = ops.matmul(av, bv)

        def back(g):
            return ops.matmul(g, _swap_last(bv)), ops.matmul(_swap_last(av), g)

        return self._emit(out, (a, b), back)

    def linear(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """x[..., k] @ w[k, n] (+ b) over arbitrary leading dims."""
        lead = x.shape[:-1]
        flat = self.reshape(x, (-1, x.shape[-1]))
        y = self.matmul(flat, w)
        if b is not None:
            y = self.add(y, b)
        return self.reshape(y, lead + (w.shape[1],))

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._emit(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a: Node, c: float) -> Node:
        c = self.dtype.type(c)
        return self._emit(a.value * c, (a,), lambda g: (g * c,))

    def softmax_rows(self, a: Node) -> Node:
        y = ops.softmax_rows(a.value)

        def back(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._emit(y, (a,), back)

    def layer_norm(self, x: Node, gain: Node, bias: Node) -> Node:
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(f"layer_norm affine shape must be ({d},)")
        xhat, inv = ops.layer_norm_parts(x.value)
        gv = gain.value
        y = xhat * gv + bias.value

        def back(g):
            red = tuple(range(g.ndim - 1))
            dgain = (g * xhat).sum(axis=red)
            dbias = g.sum(axis=red)
            gx = g * gv
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            return dx, dgain, dbias

        return self._emit(y, (x, gain, bias), back)

    def gelu(self, a: Node) -> Node:
        av = a.value
        y, th = ops.gelu_parts(av)
        return self._emit(y, (a,), lambda g: (g * ops.gelu_grad(av, th),))

    def reshape(self, a: Node, shape) -> Node:
        src = a.shape
        return self._emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))

    def transpose(self, a: Node, axes) -> Node:
        inv = np.argsort(axes)
        out = np.ascontiguousarray(a.value.transpose(axes))
        return self._emit(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))

    def slice(self, a: Node, key) -> Node:
        src, dt = a.shape, a.value.dtype

        def back(g):
            full = np.zeros(src, dtype=dt)
            full[key] = g
            return (full,)

        return self._emit(np.ascontiguousarray(a.value[key]), (a,), back)

    def take_rows(self, table: Node, idx) -> Node:
        """Embedding lookup ``table[idx]``; gradients scatter-add in index order."""
        idx = np.asarray(idx, dtype=np.int64)
        tv = table.value
        if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
            raise ValidationError(f"row index out of range for table with {tv.shape[0]} rows")

        def back(g):
            full = np.zeros_like(tv)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, tv.shape[1]))
            return (full,)

        return self._emit(np.ascontiguousarray(tv[idx]), (table,), back)

    def mean(self, a: Node, axis=None) -> Node:
        src, dt = a.shape, a.value.dtype
        if axis is None:
            n = a.value.size
            return self._emit(a.value.mean(dtype=dt).reshape(()), (a,), lambda g: (np.full(src, g / n, dtype=dt),))
        axis = axis % a.value.ndim
        n = src[axis]
        out = a.value.mean(axis=axis)
        return self._emit(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis) / dt.type(n), src).copy(),))

    def sum(self, a: Node) -> Node:
        src, dt = a.shape, a.value.dtype
        return self._emit(a.value.sum(dtype=dt).reshape(()), (a,), lambda g: (np.full(src, g, dtype=dt),))

    def mse(self, a: Node, b: Node) -> Node:
        """Mean squared error over all elements."""
        if a.shape != b.shape:
            raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
        diff = a.value - b.value
        n = diff.size
        dt = diff.dtype

        def back(g):
            ga = (dt.type(2.0 / n) * g) * diff
            return ga, -ga

        return self._emit((diff * diff).mean(dtype=dt).reshape(()), (a, b), back)

    def cross_entropy(self, logits: Node, labels) -> Node:
        """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
        labels = np.asarray(labels, dtype=np.int64)
        lv = logits.value
        logp = ops.log_softmax_rows(lv)
        rows = np.arange(lv.shape[0])
        n = lv.shape[0]
        dt = lv.dtype

        def back(g):
            p = ops.exp(logp)
            p[rows, labels] -= 1
            return (p * (g / dt.type(n)),)

        return self._emit((-logp[rows, labels]).mean(dtype=dt).reshape(()), (logits,), back)

    def conv2d(self, x: Node, w: Node, b: Node, stride: int, pad: int) -> Node:
        """[B,C,H,W] conv with w[C*k*k, Cout]; returns [B,Cout,Ho,Wo]."""
        bsz, c, h, wd = x.shape
        k = int(round((w.shape[0] // c) ** 0.5))
        if c * k * k != w.shape[0]:
            raise ShapeError(f"conv weight rows {w.shape[0]} incompatible with {c} input channels")
        ho = (h + 2 * pad - k) // stride + 1
        wo = (wd + 2 * pad - k) // stride + 1
        xshape = x.shape
        cols_v = ops.im2col(x.value, k, stride, pad)
        cols = self._emit(cols_v, (x,), lambda g: (ops.col2im(g, xshape, k, stride, pad),))
        y = self.add(self.matmul(cols, w), b)  # [B*Ho*Wo, Cout]
        y = self.reshape(y, (bsz, ho, wo, w.shape[1]))
        return self.transpose(y, (0, 3, 1, 2))

    # -- differentiation --------------------------------------------------------
    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        if loss.value.size != 1:
            raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.record:
            raise ValidationError("graph was built with record=False")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg.astype(self.dtype, copy=False) if prev is None else prev + pg
        out = {}
        for name, p in self.params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.value) if g is None else ops.check_finite(np.ascontiguousarray(g), f"grad {name}")
        return out


def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    return graph.backward(loss)
