"""Cross-entropy, temperature-softened KD and the composite distillation objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .contrastive import CKTWeights, CriticParams, MemoryBank, l_ckt, l_mckt, l_pckt
from .errors import ParameterError, ShapeError, UsageError
from .models import ModuleOutputs
from .projection import HeadSet
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    gamma: int = 1
    theta: float = 0.0
    rho: float = 4.0
    ckt_weights: CKTWeights = field(default_factory=CKTWeights)
    critic: CriticParams = field(default_factory=CriticParams)
    distill_method: str = "kd"

    def __post_init__(self):
        if self.gamma not in (0, 1):
            raise ParameterError(f"gamma must be 0 or 1, got {self.gamma}")
        if not self.rho > 0:
            raise ParameterError(f"rho must be positive, got {self.rho}")
        if not self.theta >= 0:
            raise ParameterError(f"theta must be >= 0, got {self.theta}")


@dataclass
class LossBreakdown:
    total: Tensor
    ce: Tensor
    ckt: Tensor
    distill: Tensor
    per_module: list[Tensor]
    pen: Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        row = {"total": self.total.item(), "ce": self.ce.item(),
               "ckt": self.ckt.item(), "distill": self.distill.item()}
        for m, v in enumerate(self.per_module):
            row[f"mckt{m}"] = v.item()
        row["pckt"] = self.pen.item() if self.pen is not None else 0.0
        return row


def _one_hot(labels, c: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise UsageError(f"labels must lie in [0, {c})")
    out = np.zeros((labels.size, c))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(labels, logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, c], got {logits.shape}")
    target = _one_hot(labels, logits.shape[1])
    if target.shape[0] != logits.shape[0]:
        raise ShapeError(f"{target.shape[0]} labels for {logits.shape[0]} rows")
    return -(T.log_softmax(logits) * target).sum(axis=1).mean()


def kd_kl(teacher_logits, student_logits: Tensor, rho: float = 4.0) -> Tensor:
    """rho^2 * mean_b KL(softmax(t / rho) || softmax(s / rho)); teacher is detached."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {t.shape} vs student {student_logits.shape}")
    log_p = T.log_softmax(Tensor(t), rho).data
    p = np.exp(log_p)
    log_q = T.log_softmax(student_logits, rho)
    kl = (T.as_tensor(p * log_p) - log_q * p).sum(axis=1).mean()
    return kl * (rho * rho)


DISTILL_METHODS: dict[str, Callable[[ModuleOutputs, ModuleOutputs, LossConfig], Tensor]] = {
    "kd": lambda s, t, cfg: kd_kl(t.logits, s.logits, cfg.rho),
}


def total_loss(labels, student_out: ModuleOutputs, teacher_out: ModuleOutputs,
               heads: HeadSet | None, bank: MemoryBank | None, cfg: LossConfig,
               sample_indices=None, rng: np.random.Generator | None = None) -> LossBreakdown:
    """gamma * CE + contrastive term + theta * third-term loss.

    Terms whose weight is zero are not evaluated (they are reported as 0);
    with both contrastive weights zero no bank is sampled or updated.
    """
    zero = T.as_tensor(0.0)
    ce = cross_entropy(labels, student_out.logits) if cfg.gamma else zero
    w = cfg.ckt_weights
    per_module: list[Tensor] = []
    pen = None
    ckt = zero
    if w.alpha1 > 0 or w.alpha2 > 0:
        if heads is None:
            raise UsageError("contrastive terms need projection heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        if w.alpha1 > 0:
            per_module = l_mckt(teacher_out.module_reps, student_out.module_reps, heads, bank,
                                cfg.critic, sample_indices, rng)
        if w.alpha2 > 0:
            pen = l_pckt(teacher_out.penultimate, student_out.penultimate, heads, bank,
                         cfg.critic, sample_indices, rng)
        ckt = l_ckt(per_module, pen if pen is not None else zero, w)
    if cfg.theta > 0:
        if cfg.distill_method not in DISTILL_METHODS:
            raise UsageError(f"unknown distillation method {cfg.distill_method!r}")
        distill = DISTILL_METHODS[cfg.distill_method](student_out, teacher_out, cfg)
    else:
        distill = zero

    total = ckt
    if cfg.gamma:
        total = ce + total
    if cfg.theta > 0:
        total = total + distill * cfg.theta
    return LossBreakdown(total=total, ce=ce, ckt=ckt, distill=distill, per_module=per_module, pen=pen)
