"""Pooling and projection of stage outputs onto the unit sphere in R^d."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, SpecError
from .tensor import Tensor

DEFAULT_DIM = 128
KINDS = ("linear", "mlp")


def pool_and_flatten(rep: Tensor) -> Tensor:
    if rep.ndim != 4:
        raise ShapeError(f"expected a rank-4 representation, got {rep.shape}")
    b, o = rep.shape[:2]
    return T.global_avg_pool(rep).reshape(b, o)


@dataclass
class EmbeddingBatch:
    values: Tensor
    sample_indices: np.ndarray

    def __post_init__(self):
        self.sample_indices = np.asarray(self.sample_indices, dtype=np.int64)
        if self.values.shape[0] != self.sample_indices.size:
            raise ShapeError("one sample index per embedding row is required")


class ProjectionHead:
    """Affine (or affine-relu-affine) map followed by row-wise l2 normalization.

    The mlp variant uses a hidden layer as wide as the input. With
    ``batch_center`` every affine input has its batch mean removed and the
    biases are dropped, so a batch can never map onto a single direction.
    """

    def __init__(self, input_dim: int, output_dim: int = DEFAULT_DIM, kind: str = "linear",
                 rng: np.random.Generator | None = None, name: str = "head",
                 batch_center: bool = False):
        if kind not in KINDS:
            raise SpecError(f"unknown projection kind {kind!r}")
        if input_dim < 1 or output_dim < 1:
            raise SpecError("projection dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.name = name
        self.batch_center = batch_center
        self.params: dict[str, Tensor] = {}
        dims = [input_dim, output_dim] if kind == "linear" else [input_dim, input_dim, output_dim]
        for i in range(len(dims) - 1):
            bound = 1.0 / np.sqrt(dims[i])
            self._add(f"fc{i}.weight", rng.uniform(-bound, bound, (dims[i], dims[i + 1])))
            bias = rng.uniform(-bound, bound, dims[i + 1])
            if not batch_center:
                self._add(f"fc{i}.bias", bias)

    def _add(self, key, value):
        full = f"{self.name}.{key}"
        self.params[key] = Tensor(value, requires_grad=True, name=full)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, flat: Tensor) -> Tensor:
        if flat.ndim != 2 or flat.shape[1] != self.input_dim:
            raise ShapeError(f"{self.name}: expected [B, {self.input_dim}], got {flat.shape}")
        h = self._layer(flat, 0)
        if self.kind == "mlp":
            h = self._layer(T.relu(h), 1)
        return T.l2_normalize(h)

    def _layer(self, x: Tensor, i: int) -> Tensor:
        if self.batch_center:
            if x.shape[0] < 2:
                raise ShapeError(f"{self.name}: batch centering needs at least two rows")
            x = x - x.mean(axis=0, keepdims=True)
            return T.matmul(x, self.params[f"fc{i}.weight"])
        return T.affine(x, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])

    __call__ = forward

    def center(self, flat) -> None:
        """Set biases so each affine output has zero mean over ``flat``.

        Pooled post-ReLU features are nonnegative, so an uncentered head maps
        every sample into a narrow cone and the critic saturates.
        """
        if self.batch_center:
            return
        h = np.asarray(getattr(flat, "data", flat), dtype=np.float64)
        n_layers = 1 if self.kind == "linear" else 2
        for i in range(n_layers):
            w = self.params[f"fc{i}.weight"].data
            self.params[f"fc{i}.bias"].data = -(h.mean(axis=0) @ w)
            h = h @ w + self.params[f"fc{i}.bias"].data
            if i + 1 < n_layers:
                h = np.maximum(h, 0.0)


def project(head: ProjectionHead, flat: Tensor, sample_indices=None) -> EmbeddingBatch:
    if sample_indices is None:
        sample_indices = np.arange(flat.shape[0])
    return EmbeddingBatch(head(flat), sample_indices)


@dataclass
class HeadPair:
    teacher: ProjectionHead
    student: ProjectionHead


@dataclass
class HeadSet:
    """One head pair per contrastive site: M stages then the penultimate site."""

    modules: list[HeadPair]
    penultimate: HeadPair
    kind: str = "linear"
    dim: int = DEFAULT_DIM
    _all: list[HeadPair] = field(init=False, repr=False)

    def __post_init__(self):
        self._all = [*self.modules, self.penultimate]

    def __len__(self) -> int:
        return len(self._all)

    def __iter__(self):
        return iter(self._all)

    def parameters(self) -> list[Tensor]:
        return [p for pair in self._all for h in (pair.teacher, pair.student) for p in h.parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def center(self, teacher_out, student_out) -> None:
        """Data-dependent bias init of every head from one probe forward pass."""
        for pair, t_rep, s_rep in zip(self.modules, teacher_out.module_reps, student_out.module_reps):
            pair.teacher.center(pool_and_flatten(t_rep))
            pair.student.center(pool_and_flatten(s_rep))
        self.penultimate.teacher.center(teacher_out.penultimate)
        self.penultimate.student.center(student_out.penultimate)

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=np.float64)


def make_heads(teacher_dims: list[int], student_dims: list[int], d: int = DEFAULT_DIM,
               kind: str = "linear", seed: int = 0,
               teacher_pen_dim: int | None = None, student_pen_dim: int | None = None,
               batch_center: bool = False) -> HeadSet:
    """Build M stage head pairs plus a penultimate pair, all trainable.

    Penultimate widths default to the last stage widths, which is what the
    model zoo produces.
    """
    if len(teacher_dims) != len(student_dims):
        raise SpecError(f"teacher has {len(teacher_dims)} modules, student {len(student_dims)}")
    rng = np.random.default_rng(seed)
    modules = [
        HeadPair(ProjectionHead(t, d, kind, rng, f"heads.m{m}.teacher", batch_center),
                 ProjectionHead(s, d, kind, rng, f"heads.m{m}.student", batch_center))
        for m, (t, s) in enumerate(zip(teacher_dims, student_dims))
    ]
    tp = teacher_pen_dim if teacher_pen_dim is not None else teacher_dims[-1]
    sp = student_pen_dim if student_pen_dim is not None else student_dims[-1]
    pen = HeadPair(ProjectionHead(tp, d, kind, rng, "heads.pen.teacher", batch_center),
                   ProjectionHead(sp, d, kind, rng, "heads.pen.student", batch_center))
    return HeadSet(modules, pen, kind=kind, dim=d)
