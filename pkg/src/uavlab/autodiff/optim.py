"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update. Returns new parameter arrays and the advanced state; inputs are left untouched."""
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            new_p.append(p)
            new_m.append(m)
            new_v.append(v)
            continue
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        new_p.append((p - update).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if not self.params:
            return
        arrays, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                       self.state, self.lr, self.betas[0], self.betas[1], self.eps)
        for p, a in zip(self.params, arrays):
            p.data = a
