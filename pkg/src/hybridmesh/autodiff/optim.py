"""Adam with decoupled weight decay and per-epoch exponential lr decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DiffValue


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5

    @classmethod
    def for_param(cls, p: DiffValue, **kw) -> "AdamState":
        return cls(m=np.zeros(p.shape), v=np.zeros(p.shape), **kw)


@dataclass
class Adam:
    """Thin convenience wrapper owning one :class:`AdamState` per parameter."""

    params: dict[str, DiffValue]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.for_param(
                    p, lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay
                )

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for s in self.states.values():
            s.lr = lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        names = list(self.params)
        adam_step([self.params[n] for n in names], [self.states[n] for n in names], names=names)

    @property
    def step_count(self) -> int:
        return max((s.step for s in self.states.values()), default=0)


def adam_step(params, states, names=None) -> None:
    """One Adam update (decoupled weight decay) for each parameter in place."""
    if len(params) != len(states):
        raise ValueError(f"adam_step: {len(params)} params but {len(states)} states")
    for i, (p, s) in enumerate(zip(params, states)):
        label = names[i] if names is not None else (p.name or f"param[{i}]")
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {label} has no gradient")
        if s.m.shape != p.shape:
            raise ValueError(f"adam_step: state shape {s.m.shape} != parameter {label} shape {p.shape}")
        b1, b2 = s.betas
        s.step += 1
        g = p.grad
        s.m = b1 * s.m + (1.0 - b1) * g
        s.v = b2 * s.v + (1.0 - b2) * g * g
        m_hat = s.m / (1.0 - b1**s.step)
        v_hat = s.v / (1.0 - b2**s.step)
        if s.weight_decay:
            p.data = p.data - s.lr * s.weight_decay * p.data
        p.data = p.data - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


def lr_at_epoch(base_lr: float, epoch: int, decay: float = 0.99) -> float:
    """Learning rate after ``epoch`` completed epochs of multiplicative decay."""
    return base_lr * decay**epoch
