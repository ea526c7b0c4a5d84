"""Adam with linear warm-up followed by inverse square-root decay."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def inverse_sqrt_lr(step: int, base_lr: float, warmup: int) -> float:
    """base * min(step / warmup, sqrt(warmup / step)); zero at step 0."""
    if step <= 0:
        return 0.0
    if warmup <= 0:
        return base_lr
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 3e-4, betas=(0.9, 0.98),
                 eps: float = 1e-9, warmup: int = 0):
        self.params = dict(named_params)
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup = warmup
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def current_lr(self, step: int | None = None) -> float:
        return inverse_sqrt_lr(self.step_count if step is None else step, self.base_lr, self.warmup)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the learning rate that was used."""
        self.step_count += 1
        t = self.step_count
        lr = self.current_lr()
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr != 0.0:
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data -= (lr * update).astype(p.dtype)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for name, p in self.params.items():
            self.m[name] = arrays[f"adam_m/{name}"].astype(p.dtype).copy()
            self.v[name] = arrays[f"adam_v/{name}"].astype(p.dtype).copy()
        self.step_count = step
