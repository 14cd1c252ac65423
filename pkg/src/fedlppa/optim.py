"""AdamW with decoupled weight decay and the polynomial learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: OptimizerState, lr: float):
    """Apply one AdamW update in place and return ``params``.

    ``params`` and ``grads`` are parallel lists of arrays; a ``None`` gradient
    is treated as zero (weight decay still applies).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != m.shape:
            raise ValueError(f"parameter shape {p.shape} does not match moment {m.shape}")
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-2, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(base_lr=lr, weight_decay=weight_decay,
                                    beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.state.base_lr if lr is None else lr
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)


def poly_lr(base_lr: float, t: float, total: float, power: float = 0.9) -> float:
    """``base_lr * (1 - t/total) ** power`` for 0 <= t <= total."""
    if total == 0:
        raise ValueError("total rounds must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"round index {t} outside [0, {total}]")
    return base_lr * (1.0 - t / total) ** power
