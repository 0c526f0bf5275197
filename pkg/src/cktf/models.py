"""Plain VGG-style CNNs with activation taps at every stage.

A model is a sequence of stages; each stage is a run of 3x3 conv + ReLU
layers, the first of which has stride 2 when the stage downsamples. The
output of one chosen conv layer per stage (the last by default) is the
stage's tapped representation. Global average pooling of the final stage
gives the penultimate vector, which feeds a single affine classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError, SpecError
from .tensor import Tensor

KERNEL = 3
PADDING = 1


@dataclass(frozen=True)
class StageSpec:
    channels: int
    num_convs: int = 1
    downsample: bool = False


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple[StageSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.stages:
            raise SpecError("a model needs at least one stage")
        for s in self.stages:
            if s.channels < 1 or s.num_convs < 1:
                raise SpecError(f"invalid stage {s}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be [C, H, W], got {self.input_shape}")

    @property
    def num_modules(self) -> int:
        return len(self.stages)

    @property
    def layers_per_module(self) -> list[int]:
        return [s.num_convs for s in self.stages]

    def module_layer_range(self, m: int) -> range:
        """Global conv-layer indices belonging to stage ``m``."""
        start = sum(self.layers_per_module[:m])
        return range(start, start + self.stages[m].num_convs)

    def last_layers(self) -> list[int]:
        return [self.module_layer_range(m)[-1] for m in range(self.num_modules)]

    def spatial_sizes(self) -> list[tuple[int, int]]:
        _, h, w = self.input_shape
        sizes = []
        for s in self.stages:
            if s.downsample:
                h = (h + 2 * PADDING - KERNEL) // 2 + 1
                w = (w + 2 * PADDING - KERNEL) // 2 + 1
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        return {
            "stages": [asdict(s) for s in self.stages],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(stages=tuple(StageSpec(**s) for s in d["stages"]),
                   num_classes=int(d["num_classes"]),
                   input_shape=tuple(d["input_shape"]))


@dataclass
class ModuleOutputs:
    module_reps: list[Tensor]
    penultimate: Tensor
    logits: Tensor
    # every conv output when requested with tap_all=True, else empty
    all_layers: list[Tensor] = field(default_factory=list)


class Model:
    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.conv_names: list[str] = []
        self.conv_strides: list[int] = []
        self.taps: list[int] = spec.last_layers()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> None:
        in_ch = self.spec.input_shape[0]
        for m, stage in enumerate(self.spec.stages):
            for k in range(stage.num_convs):
                name = f"stage{m}.conv{k}"
                fan_in = in_ch * KERNEL * KERNEL
                bound = np.sqrt(6.0 / fan_in)
                self._add(f"{name}.weight", rng.uniform(-bound, bound, (stage.channels, in_ch, KERNEL, KERNEL)))
                self._add(f"{name}.bias", np.zeros(stage.channels))
                self.conv_names.append(name)
                self.conv_strides.append(2 if (k == 0 and stage.downsample) else 1)
                in_ch = stage.channels
        self.reset_classifier(rng)

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise SpecError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def reset_classifier(self, rng: np.random.Generator) -> None:
        width = self.spec.stages[-1].channels
        bound = 1.0 / np.sqrt(width)
        for name, value in (
            ("classifier.weight", rng.uniform(-bound, bound, (width, self.spec.num_classes))),
            ("classifier.bias", np.zeros(self.spec.num_classes)),
        ):
            self.params[name] = Tensor(value, requires_grad=True, name=name)

    @property
    def penultimate_dim(self) -> int:
        return self.spec.stages[-1].channels

    def parameters(self, trainable_only: bool = True) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad or not trainable_only]

    def backbone_parameters(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if not n.startswith("classifier.")]

    def classifier_parameters(self) -> list[Tensor]:
        return [self.params["classifier.weight"], self.params["classifier.bias"]]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise FormatError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for n, v in state.items():
            if v.shape != self.params[n].shape:
                raise FormatError(f"{n}: shape {v.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(v, dtype=np.float64)

    def __call__(self, batch) -> ModuleOutputs:
        return forward_with_taps(self, batch)


def build_cnn(spec: ModelSpec, seed: int) -> Model:
    """Construct a seeded model; fails if the downsampling chain underflows."""
    h, w = spec.input_shape[1:]
    for s in spec.stages:
        if s.downsample:
            if h < 2 or w < 2:
                raise SpecError(f"input {spec.input_shape[1:]} too small for the downsampling chain")
            h = (h + 2 * PADDING - KERNEL) // 2 + 1
            w = (w + 2 * PADDING - KERNEL) // 2 + 1
    return Model(spec, seed)


def forward_with_taps(model: Model, batch, taps: list[int] | None = None,
                      tap_all: bool = False) -> ModuleOutputs:
    """One differentiable pass returning tapped stage outputs, penultimate and logits.

    ``taps`` gives one global conv-layer index per stage; defaults to the
    model's current taps (the last conv of each stage unless remapped).
    """
    x = T.as_tensor(batch)
    spec = model.spec
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input {spec.input_shape}")
    taps = model.taps if taps is None else taps
    if len(taps) != spec.num_modules:
        raise SpecError(f"need {spec.num_modules} tap indices, got {len(taps)}")
    for m, t in enumerate(taps):
        if t not in spec.module_layer_range(m):
            raise SpecError(f"tap {t} is outside stage {m}")

    tap_set = {t: m for m, t in enumerate(taps)}
    reps: list[Tensor | None] = [None] * spec.num_modules
    every: list[Tensor] = []
    for i, name in enumerate(model.conv_names):
        x = T.relu(T.conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"],
                            stride=model.conv_strides[i], padding=PADDING))
        if i in tap_set:
            reps[tap_set[i]] = x
        if tap_all:
            every.append(x)
    b, c = x.shape[:2]
    pen = T.global_avg_pool(x).reshape(b, c)
    logits = T.affine(pen, model.params["classifier.weight"], model.params["classifier.bias"])
    return ModuleOutputs(module_reps=reps, penultimate=pen, logits=logits, all_layers=every)


def freeze(model: Model, names=None) -> Model:
    """Turn off gradients for all parameters (or just ``names``)."""
    for n, p in model.params.items():
        if names is None or n in names:
            p.requires_grad = False
            p.grad = None
    return model


# checkpoints ---------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"CKTFCKPT"
#   4 bytes   uint32 format version
#   8 bytes   uint64 length L of the JSON header
#   L bytes   UTF-8 JSON: {"spec", "seed", "meta", "tensors": [{"name", "shape",
#             "discardable"}...]}
#   rest      tensor payloads in header order, float64 little-endian, row-major

MAGIC = b"CKTFCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec: ModelSpec | None, seed: int, tensors: dict[str, np.ndarray],
                    discardable=(), meta: dict | None = None) -> None:
    names = list(tensors)
    header = {
        "spec": spec.to_dict() if spec is not None else None,
        "seed": int(seed),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n])),
                     "discardable": n in set(discardable)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + 12
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    tensors, discardable = {}, []
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        if entry["discardable"]:
            discardable.append(entry["name"])
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    spec = ModelSpec.from_dict(header["spec"]) if header["spec"] else None
    return {"spec": spec, "seed": header["seed"], "meta": header["meta"],
            "tensors": tensors, "discardable": discardable}


def save_model(model: Model, path, extra: dict[str, np.ndarray] | None = None,
               meta: dict | None = None) -> None:
    """Write model parameters plus optional discardable extras (e.g. projection heads)."""
    tensors = model.state_dict()
    extra = extra or {}
    tensors.update(extra)
    save_checkpoint(path, model.spec, model.seed, tensors, discardable=extra.keys(), meta=meta)


def load_model(path) -> Model:
    ckpt = load_checkpoint(path)
    if ckpt["spec"] is None:
        raise FormatError(f"{path}: checkpoint carries no model spec")
    model = build_cnn(ckpt["spec"], ckpt["seed"])
    model.load_state_dict({n: v for n, v in ckpt["tensors"].items() if n not in ckpt["discardable"]})
    if "taps" in ckpt["meta"]:
        model.taps = list(ckpt["meta"]["taps"])
    return model
