"""Step learning-rate schedule and Nesterov SGD with weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .errors import ParameterError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class TrainingSchedule:
    base_lr: float = 5e-2
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (150, 180, 210)
    total_epochs: int = 240
    weight_decay: float = 5e-4
    momentum: float = 0.9
    nesterov: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ParameterError(f"decay epochs must be strictly increasing, got {d}")
        if d and d[-1] >= self.total_epochs:
            raise ParameterError(f"decay epoch {d[-1]} is not before total_epochs {self.total_epochs}")
        if self.total_epochs < 0:
            raise ParameterError("total_epochs must be >= 0")

    @classmethod
    def full(cls, **overrides) -> "TrainingSchedule":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainingSchedule":
        base = dict(decay_epochs=(15, 22, 27), total_epochs=30)
        base.update(overrides)
        return cls(**base)


def lr_at_epoch(schedule: TrainingSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    k = sum(1 for e in schedule.decay_epochs if e <= epoch)
    # exact decimal product of the written values, rounded once, so that
    # 0.05 * 0.1**3 comes out as 5e-05 rather than 5.0000000000000016e-05
    return float(Decimal(repr(schedule.base_lr)) * Decimal(repr(schedule.decay_factor)) ** k)


@dataclass
class SGD:
    """Nesterov/heavy-ball SGD; velocity buffers keyed by parameter identity.

        g <- grad + wd * w
        v <- mu * v + g
        w <- w - lr * (g + mu * v)      (nesterov)
        w <- w - lr * v                 (plain momentum)
    """

    params: list[Tensor]
    schedule: TrainingSchedule
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.params:
            raise UsageError("optimizer received an empty parameter list")

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, epoch: int, lr: float | None = None) -> None:
        sgd_step(self.params, self.schedule, epoch, self.velocity, lr=lr)


def sgd_step(params, schedule: TrainingSchedule, epoch: int, velocity: dict,
             lr: float | None = None) -> dict:
    lr = lr_at_epoch(schedule, epoch) if lr is None else lr
    mu, wd = schedule.momentum, schedule.weight_decay
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name or id(p)} has no gradient")
        g = p.grad + wd * p.data if wd else p.grad
        v = velocity.get(id(p))
        v = g.copy() if v is None else mu * v + g
        velocity[id(p)] = v
        step = g + mu * v if schedule.nesterov else v
        p.data = p.data - lr * step
    return velocity
