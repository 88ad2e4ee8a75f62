"""Counter-based random streams.

Each stream is Philox4x64-10 keyed by ``(seed, stream)``. Draw ``i`` is word
``i % 4`` of the block at counter ``i // 4 + 1`` (numpy advances the counter
before its first block), so any draw can be recomputed from
``(seed, stream, index)`` without replaying earlier ones. Normals use
Box-Muller on pairs of draws.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4


def stream_id(label: str | int) -> int:
    """Stable 64-bit id for a stream label."""
    if isinstance(label, int):
        return label & MASK64
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


class Rng:
    def __init__(self, seed: int, stream: str | int = 0, position: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = stream_id(stream)
        self.position = int(position)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream:#x}, position={self.position})"

    def substream(self, label: str | int) -> "Rng":
        """A fresh stream derived from this one's (seed, stream) and a label."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream.to_bytes(8, "little"))
        h.update(stream_id(label).to_bytes(8, "little"))
        return Rng(self.seed, int.from_bytes(h.digest(), "little"))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` uint64 draws."""
        block, offset = divmod(self.position, _WORDS_PER_BLOCK)
        counter = np.array([block & MASK64, block >> 64, 0, 0], dtype=np.uint64)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        bitgen = np.random.Philox(counter=counter, key=key)
        out = bitgen.random_raw(offset + n)[offset:]
        self.position += n
        return np.asarray(out, dtype=np.uint64)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """float64 uniforms in [low, high)."""
        n = math.prod(shape) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return u.reshape(shape) if shape else u[0]

    def integers(self, low: int, high: int, shape=()):
        """Integers in [low, high); the tiny modulo bias is irrelevant at these ranges."""
        n = math.prod(shape) if shape else 1
        span = np.uint64(high - low)
        vals = (self.raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        keys = self.raw(n)
        return np.argsort(keys, kind="stable")

    def randn(self, shape) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        r = (self.raw(2 * pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (r[0::2] + 1.0) * 2.0**-53  # (0, 1]
        u2 = r[1::2] * 2.0**-53
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = rad * np.cos(ang)
        z[1::2] = rad * np.sin(ang)
        return np.ascontiguousarray(z[:n].astype(np.float32).reshape(shape))


def randn(rng: Rng, shape) -> np.ndarray:
    return rng.randn(shape)
