"""Choice of which teacher conv layer pairs with the student's stage output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError, SpecError, UsageError
from .models import Model, forward_with_taps

STRATEGIES = ("teacher_first", "teacher_last", "teacher_random", "cosine_max", "cosine_min")


@dataclass(frozen=True)
class MappingStrategy:
    kind: str = "teacher_last"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise SpecError(f"unknown mapping strategy {self.kind!r}; choose from {STRATEGIES}")


@dataclass(frozen=True)
class LayerMapping:
    """(teacher_layer, student_layer) per stage, global conv indices."""

    pairs: tuple[tuple[int, int], ...]
    scores: tuple[tuple[float, ...], ...] = ()

    @property
    def teacher_taps(self) -> list[int]:
        return [t for t, _ in self.pairs]

    @property
    def student_taps(self) -> list[int]:
        return [s for _, s in self.pairs]

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "scores": [list(s) for s in self.scores]}


def cosine_score(a, b) -> float:
    """Batch mean of row-wise cosine similarity between [B, n] arrays."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"cosine_score needs equal [B, n] inputs, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine similarity of a zero row is undefined")
    cos = (a * b).sum(axis=1) / (na * nb)
    return float(np.clip(cos, -1.0, 1.0).mean())


def match_width(x: np.ndarray, n: int) -> np.ndarray:
    """Shrink [B, k] channel means to [B, n] by averaging contiguous channel groups."""
    k = x.shape[1]
    if k == n:
        return x
    if k < n:
        raise ShapeError(f"cannot widen {k} channels to {n}")
    return np.stack([g.mean(axis=1) for g in np.array_split(x, n, axis=1)], axis=1)


def _channel_means(rep) -> np.ndarray:
    return rep.data.mean(axis=(2, 3))


def layer_scores(teacher: Model, student: Model, probe_batch) -> list[list[float]]:
    """Cosine score of every teacher layer in a stage against the student's last layer."""
    t_out = forward_with_taps(teacher, probe_batch, tap_all=True)
    s_out = forward_with_taps(student, probe_batch, tap_all=True)
    scores = []
    for m in range(teacher.spec.num_modules):
        s_last = _channel_means(s_out.all_layers[student.spec.module_layer_range(m)[-1]])
        row = []
        for t_idx in teacher.spec.module_layer_range(m):
            t_feat = _channel_means(t_out.all_layers[t_idx])
            n = min(t_feat.shape[1], s_last.shape[1])
            row.append(cosine_score(match_width(t_feat, n), match_width(s_last, n)))
        scores.append(row)
    return scores


def map_layers(strategy: MappingStrategy, teacher: Model, student: Model, probe_batch=None) -> LayerMapping:
    t_spec, s_spec = teacher.spec, student.spec
    if t_spec.num_modules != s_spec.num_modules:
        raise SpecError(f"teacher has {t_spec.num_modules} modules, student {s_spec.num_modules}")
    student_last = s_spec.last_layers()
    kind = strategy.kind
    scores: list[list[float]] = []
    if kind == "teacher_first":
        teacher_idx = [t_spec.module_layer_range(m)[0] for m in range(t_spec.num_modules)]
    elif kind == "teacher_last":
        teacher_idx = t_spec.last_layers()
    elif kind == "teacher_random":
        rng = np.random.default_rng(strategy.seed)
        teacher_idx = [int(rng.choice(list(t_spec.module_layer_range(m)))) for m in range(t_spec.num_modules)]
    else:
        if probe_batch is None:
            raise UsageError(f"{kind} mapping requires a probe batch")
        scores = layer_scores(teacher, student, probe_batch)
        pick = np.argmax if kind == "cosine_max" else np.argmin
        teacher_idx = [t_spec.module_layer_range(m)[int(pick(row))] for m, row in enumerate(scores)]
    return LayerMapping(pairs=tuple(zip(teacher_idx, student_last)),
                        scores=tuple(tuple(r) for r in scores))
