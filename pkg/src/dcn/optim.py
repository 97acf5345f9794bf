from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias-corrected moments. Updates ``param.data`` in place."""

    def __init__(
        self,
        params: dict,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        lr_scale: dict | None = None,
    ):
        self.params = dict(params)
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})  # per-parameter multiplier on lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = self.lr * self.lr_scale.get(name, 1.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict, t: int) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam.m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(arrays[f"adam.v.{name}"], dtype=self.v[name].dtype)
        self.t = t
