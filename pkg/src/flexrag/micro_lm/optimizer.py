"""Adam with bias correction and a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import NonFiniteGradient
from .model import Parameter


class Adam:
    def __init__(self, params: list[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if not p.frozen]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.values) for p in self.params}
        self.v = {p.name: np.zeros_like(p.values) for p in self.params}

    def step(self, lr: float) -> None:
        """One update; frozen parameters are never touched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {p.name}")
            m = self.m[p.name]
            v = self.v[p.name]
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * (g * g)
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.m:
            out["m." + name] = self.m[name]
            out["v." + name] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name][...] = arrays["m." + name]
            self.v[name][...] = arrays["v." + name]


def optimizer_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


def cosine_lr(base_lr: float, step: int, total_steps: int,
              min_frac: float = 0.1) -> float:
    """Cosine decay from base_lr to min_frac * base_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return base_lr * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + math.cos(math.pi * t)))
