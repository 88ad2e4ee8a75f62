from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamSettings:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction; updates a dict of float32 arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], settings: AdamSettings | None = None):
        self.s = settings or AdamSettings()
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        s = self.s
        self.t += 1
        c1 = 1.0 - s.beta1**self.t
        c2 = 1.0 - s.beta2**self.t
        step = np.float32(s.lr * np.sqrt(c2) / c1)
        b1, b2 = np.float32(s.beta1), np.float32(s.beta2)
        eps = np.float32(s.eps * np.sqrt(c2))
        for name in sorted(params):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            params[name] -= step * m / (np.sqrt(v) + eps)
