"""AdamW with decoupled weight decay and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp from 0, then flat."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Apply one AdamW update in place.

    ``lr`` is the effective (already warmed-up) rate. Parameters without a
    gradient entry are skipped entirely.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` with warmup."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, warmup_steps=0):
        self.params = params
        self.base_lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.state = AdamWState()

    @property
    def current_lr(self) -> float:
        return warmup_lr(self.base_lr, self.state.step + 1, self.warmup_steps)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        lr = self.current_lr
        adamw_step(self.params, grads, self.state, lr, self.betas, self.eps, self.weight_decay)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.state.m.items()}
        out.update({f"v/{k}": v for k, v in self.state.v.items()})
        return out
