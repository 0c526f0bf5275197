"""Contrastive transfer objectives over stage and penultimate embeddings.

Scores use the critic

    f(u, v) = exp(u.v / tau) / (exp(u.v / tau) + N / N_d)

evaluated in log space as ``-softplus(log(N/N_d) - u.v/tau)``. For each
student anchor the loss is ``-log f(pos) / (f(pos) + sum_j f(neg_j))``
averaged over the batch, where the negatives are teacher-side embeddings
of other training samples drawn from a memory bank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ParameterError, ShapeError, UsageError
from .projection import EmbeddingBatch, HeadPair, HeadSet, pool_and_flatten, project
from .tensor import Tensor

SIDES = ("teacher", "student")


@dataclass(frozen=True)
class CriticParams:
    tau: float = 0.1
    num_negatives: int = 64
    dataset_size: int = 400

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.num_negatives < 1:
            raise ParameterError("num_negatives must be >= 1")
        if self.dataset_size < 1:
            raise ParameterError("dataset_size must be >= 1")

    @property
    def log_ratio(self) -> float:
        return math.log(self.num_negatives / self.dataset_size)


@dataclass(frozen=True)
class CKTWeights:
    alpha1: float = 0.8
    alpha2: float = 0.2

    def __post_init__(self):
        for v in (self.alpha1, self.alpha2):
            if not (math.isfinite(v) and v >= 0):
                raise ParameterError(f"contrastive weights must be finite and >= 0, got {v}")


def log_critic(scores, params: CriticParams):
    """log f for dot products ``scores``; accepts arrays or Tensors."""
    if isinstance(scores, Tensor):
        return -T.softplus(params.log_ratio - scores * (1.0 / params.tau))
    return -np.logaddexp(0.0, params.log_ratio - np.asarray(scores, dtype=np.float64) / params.tau)


def critic_f(u, v, params: CriticParams) -> float:
    s = float(np.dot(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)))
    if not math.isfinite(s):
        raise DegenerateInputError("critic received a non-finite similarity")
    return float(np.exp(log_critic(s, params)))


def nce_loss(anchor, positives, negatives, params: CriticParams) -> Tensor:
    """Batch-mean contrastive loss of student anchors against teacher pairs.

    ``negatives`` is [B, N, d]: a constant array (bank entries) or a live
    Tensor (in-batch mode).
    """
    a = anchor.values if isinstance(anchor, EmbeddingBatch) else T.as_tensor(anchor)
    p = positives.values if isinstance(positives, EmbeddingBatch) else T.as_tensor(positives)
    if isinstance(anchor, EmbeddingBatch) and isinstance(positives, EmbeddingBatch):
        if not np.array_equal(anchor.sample_indices, positives.sample_indices):
            raise UsageError("anchor and positive sample indices differ")
    if a.shape != p.shape or a.ndim != 2:
        raise ShapeError(f"anchor {a.shape} and positives {p.shape} must both be [B, d]")
    neg = T.as_tensor(negatives)
    b, d = a.shape
    if neg.ndim != 3 or neg.shape[0] != b or neg.shape[2] != d:
        raise ShapeError(f"negatives must be [{b}, N, {d}], got {neg.shape}")
    if neg.shape[1] != params.num_negatives:
        raise UsageError(f"got {neg.shape[1]} negatives per anchor, critic expects {params.num_negatives}")

    lf_pos = log_critic((a * p).sum(axis=1, keepdims=True), params)
    lf_neg = log_critic((a.reshape(b, 1, d) * neg).sum(axis=2), params)
    log_denom = T.logsumexp(T.concat([lf_pos, lf_neg], axis=1), axis=1)
    return (log_denom - lf_pos.reshape(b)).mean()


# memory bank --------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class MemoryBank:
    """Per-sample unit embeddings for each (site, side), seeded at random.

    Sites are ``0..M-1`` for stages and ``M`` for the penultimate vectors.
    Updates requested during a loss evaluation are staged and applied by
    ``commit`` so that the optimizer step sees the bank as it was sampled.
    """

    def __init__(self, num_sites: int, dataset_size: int, dim: int,
                 momentum: float = 0.5, seed: int = 0):
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"bank momentum must lie in [0, 1), got {momentum}")
        self.num_sites = num_sites
        self.dataset_size = dataset_size
        self.dim = dim
        self.momentum = momentum
        rng = np.random.default_rng(seed)
        self.slots = {
            (site, side): _unit_rows(rng.standard_normal((dataset_size, dim)))
            for site in range(num_sites) for side in SIDES
        }
        self._pending: list[tuple[int, str, np.ndarray, np.ndarray]] = []

    def _check(self, site: int, side: str) -> np.ndarray:
        if (site, side) not in self.slots:
            raise UsageError(f"no bank for site {site!r}, side {side!r}")
        return self.slots[(site, side)]

    def update(self, site: int, side: str, values: np.ndarray, indices) -> None:
        """slot[i] <- normalize(momentum * slot[i] + (1 - momentum) * e_i)."""
        slots = self._check(site, side)
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.dataset_size):
            raise UsageError(f"sample index out of range [0, {self.dataset_size})")
        values = np.asarray(values, dtype=np.float64)
        mixed = self.momentum * slots[idx] + (1.0 - self.momentum) * values
        slots[idx] = _unit_rows(mixed)

    def stage(self, site: int, side: str, emb: EmbeddingBatch) -> None:
        self._check(site, side)
        self._pending.append((site, side, emb.values.data.copy(), emb.sample_indices.copy()))

    def commit(self) -> None:
        for site, side, values, idx in self._pending:
            self.update(site, side, values, idx)
        self._pending.clear()

    def discard_pending(self) -> None:
        self._pending.clear()

    def sample_indices(self, anchor_indices, n: int, rng: np.random.Generator) -> np.ndarray:
        """[B, n] indices, each row distinct and excluding its anchor."""
        if n > self.dataset_size - 1:
            raise ParameterError(f"cannot draw {n} negatives from {self.dataset_size - 1} candidates")
        anchors = np.asarray(anchor_indices, dtype=np.int64)
        out = np.empty((anchors.size, n), dtype=np.int64)
        for r, i in enumerate(anchors):
            draw = rng.choice(self.dataset_size - 1, size=n, replace=False)
            out[r] = draw + (draw >= i)
        return out

    def sample_negatives(self, site: int, side: str, anchor_indices, n: int,
                         rng: np.random.Generator) -> np.ndarray:
        slots = self._check(site, side)
        return slots[self.sample_indices(anchor_indices, n, rng)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"bank.site{site}.{side}": v.copy() for (site, side), v in self.slots.items()}


def bank_update(bank: MemoryBank, site: int, side: str, embeddings: EmbeddingBatch) -> MemoryBank:
    bank.update(site, side, embeddings.values.data, embeddings.sample_indices)
    return bank


def sample_negatives(bank: MemoryBank, site: int, side: str, anchor_indices, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    return bank.sample_negatives(site, side, anchor_indices, n, rng)


def in_batch_negatives(positives: Tensor, n: int, rng: np.random.Generator) -> Tensor:
    """Live [B, n, d] negatives taken from the other rows of ``positives``."""
    b = positives.shape[0]
    if n > b - 1:
        raise ParameterError(f"in-batch mode needs B - 1 >= N, got B={b}, N={n}")
    rows = []
    for i in range(b):
        draw = rng.choice(b - 1, size=n, replace=False)
        rows.append(draw + (draw >= i))
    return T.index_rows(positives, np.stack(rows))


# per-site and combined losses ----------------------------------------------

def site_loss(teacher_flat: Tensor, student_flat: Tensor, pair: HeadPair, site: int,
              sample_indices, params: CriticParams, bank: MemoryBank | None,
              rng: np.random.Generator) -> Tensor:
    """Project both sides at one site and score the student against the teacher."""
    t_emb = project(pair.teacher, teacher_flat, sample_indices)
    s_emb = project(pair.student, student_flat, sample_indices)
    if bank is None:
        negatives = in_batch_negatives(t_emb.values, params.num_negatives, rng)
    else:
        negatives = bank.sample_negatives(site, "teacher", t_emb.sample_indices,
                                          params.num_negatives, rng)
        bank.stage(site, "teacher", t_emb)
        bank.stage(site, "student", s_emb)
    return nce_loss(s_emb, t_emb, negatives, params)


def l_mckt(teacher_reps, student_reps, heads: HeadSet, bank: MemoryBank | None,
           params: CriticParams, sample_indices=None, rng: np.random.Generator | None = None
           ) -> list[Tensor]:
    """One contrastive loss per mapped stage pair."""
    if not (len(teacher_reps) == len(student_reps) == len(heads.modules)):
        raise UsageError(f"module counts differ: teacher {len(teacher_reps)}, "
                         f"student {len(student_reps)}, heads {len(heads.modules)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if sample_indices is None:
        sample_indices = np.arange(student_reps[0].shape[0])
    return [
        site_loss(pool_and_flatten(t), pool_and_flatten(s), pair, m, sample_indices, params, bank, rng)
        for m, (t, s, pair) in enumerate(zip(teacher_reps, student_reps, heads.modules))
    ]


def l_pckt(teacher_pen: Tensor, student_pen: Tensor, heads: HeadSet, bank: MemoryBank | None,
           params: CriticParams, sample_indices=None, rng: np.random.Generator | None = None
           ) -> Tensor:
    rng = rng if rng is not None else np.random.default_rng(0)
    if sample_indices is None:
        sample_indices = np.arange(student_pen.shape[0])
    return site_loss(teacher_pen, student_pen, heads.penultimate, len(heads.modules),
                     sample_indices, params, bank, rng)


def l_ckt(module_losses, pen_loss, w: CKTWeights) -> Tensor:
    total = T.as_tensor(0.0)
    for loss in module_losses:
        total = total + loss
    return total * w.alpha1 + T.as_tensor(pen_loss) * w.alpha2
