from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from varikit.tensor import Tensor


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam over a fixed list of tensors; parameters get fresh read-only arrays each step."""

    def __init__(self, params: list[Tensor], config: AdamConfig | None = None):
        self.params = params
        self.config = config or AdamConfig()
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            update = c.learning_rate * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
            new = (p.data - update).astype(p.dtype)
            new.flags.writeable = False
            p.data = new
            p.grad = None
