"""Flat ``key = value`` experiment configuration with typed keys.

A config file holds one ``key = value`` per line; blank lines and lines
starting with ``#`` are ignored. Every key is typed, unknown or repeated
keys are errors, and ``--set key=value`` overrides use the same parser.
Schedule keys left unset take their value from the ``schedule`` preset.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .contrastive import CKTWeights, CriticParams
from .errors import CKTFError, ConfigError
from .losses import LossConfig
from .mapping import STRATEGIES, MappingStrategy
from .models import ModelSpec, StageSpec
from .optim import TrainingSchedule
from .projection import KINDS

MODES = ("train_teacher", "distill", "transfer_distill", "finetune_linear", "eval")
SCHEDULE_PRESETS = ("desk", "full")
SCHEDULE_KEYS = ("base_lr", "decay_factor", "decay_epochs", "total_epochs",
                 "weight_decay", "momentum", "nesterov")


def parse_arch(text: str) -> tuple[StageSpec, ...]:
    """``"16x2,32x2d"`` -> two stages; ``x<k>`` is the conv count, ``d`` downsamples."""
    stages = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            raise ConfigError(f"empty stage in architecture {text!r}")
        down = part.endswith("d")
        body = part[:-1] if down else part
        ch, sep, convs = body.partition("x")
        try:
            n_ch, n_conv = int(ch), int(convs) if sep else 1
            if n_ch < 1 or n_conv < 1:
                raise ValueError
            stages.append(StageSpec(n_ch, n_conv, down))
        except ValueError:
            raise ConfigError(f"bad stage {part!r} in architecture {text!r}") from None
    return tuple(stages)


def format_arch(stages) -> str:
    return ",".join(f"{s.channels}x{s.num_convs}{'d' if s.downsample else ''}" for s in stages)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _shape(text: str) -> tuple[int, int, int]:
    parts = tuple(int(v) for v in text.lower().split("x"))
    if len(parts) != 3:
        raise ValueError(f"shape must be CxHxW, got {text!r}")
    return parts


def _opt_float(text: str) -> float | None:
    return None if text.strip() == "" else float(text)


def _opt_int(text: str) -> int | None:
    return None if text.strip() == "" else int(text)


def _opt_bool(text: str) -> bool | None:
    return None if text.strip() == "" else _bool(text)


def _opt_int_list(text: str) -> tuple[int, ...] | None:
    return None if text.strip() == "" else _int_list(text)


_PARSERS = {
    "str": str.strip, "int": int, "float": float, "bool": _bool, "shape": _shape,
    "opt_float": _opt_float, "opt_int": _opt_int, "opt_bool": _opt_bool, "opt_ints": _opt_int_list,
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "distill"
    seed: int = 0
    out_dir: str = "runs/out"
    # data: raw binary paths with .meta sidecars; empty means synthetic
    train_data: str = ""
    test_data: str = ""
    synth_classes: int = 4
    synth_per_class: int = 100
    synth_test_per_class: int = 50
    synth_shape: tuple[int, int, int] = (1, 8, 8)
    synth_pattern_seed: int = 0
    synth_seed: int = 1
    # models
    teacher_arch: str = "16x2,32x2d"
    student_arch: str = "4x1,8x1d"
    teacher_checkpoint: str = ""
    student_checkpoint: str = ""
    checkpoint: str = ""
    # losses
    gamma: int = 1
    theta: float = 0.0
    alpha1: float = 0.8
    alpha2: float = 0.2
    tau: float = 0.1
    rho: float = 4.0
    num_negatives: int = 64
    distill_method: str = "kd"
    proj_kind: str = "linear"
    proj_dim: int = 128
    bank_momentum: float = 0.5
    batch_center: bool = True
    mapping: str = "teacher_last"
    mapping_seed: int = 0
    probe_size: int = 64
    # optimisation
    schedule: str = "desk"
    base_lr: float | None = None
    decay_factor: float | None = None
    decay_epochs: tuple[int, ...] | None = None
    total_epochs: int | None = None
    weight_decay: float | None = None
    momentum: float | None = None
    nesterov: bool | None = None
    batch_size: int = 32
    flip: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULE_PRESETS:
            raise ConfigError(f"schedule must be one of {SCHEDULE_PRESETS}, got {self.schedule!r}")
        if self.mapping not in STRATEGIES:
            raise ConfigError(f"mapping must be one of {STRATEGIES}, got {self.mapping!r}")
        if self.proj_kind not in KINDS:
            raise ConfigError(f"proj_kind must be one of {KINDS}, got {self.proj_kind!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for key in ("teacher_arch", "student_arch"):
            parse_arch(getattr(self, key))
        # surface numeric range errors at load time rather than mid-run
        try:
            self.loss_config(dataset_size=max(self.num_negatives, 1))
            self.training_schedule()
        except CKTFError as exc:
            raise ConfigError(str(exc)) from exc

    def validate_for_mode(self) -> None:
        """Mode-specific required fields."""
        need = {
            "distill": ("teacher_checkpoint",),
            "transfer_distill": ("teacher_checkpoint",),
            "finetune_linear": ("student_checkpoint",),
            "eval": ("checkpoint",),
        }.get(self.mode, ())
        for key in need:
            value = getattr(self, key)
            if not value:
                raise ConfigError(f"mode {self.mode} requires {key}")
            if not Path(value).is_file():
                raise ConfigError(f"{key}: no such file {value!r}")
        for key in ("train_data", "test_data"):
            value = getattr(self, key)
            if value and not Path(value).is_file():
                raise ConfigError(f"{key}: no such file {value!r}")

    # derived objects -------------------------------------------------------

    def training_schedule(self) -> TrainingSchedule:
        overrides = {k: getattr(self, k) for k in SCHEDULE_KEYS if getattr(self, k) is not None}
        if self.total_epochs is not None and self.decay_epochs is None:
            # a shortened run keeps only the preset boundaries it reaches
            base = (TrainingSchedule.desk() if self.schedule == "desk" else TrainingSchedule()).decay_epochs
            overrides["decay_epochs"] = tuple(e for e in base if e < self.total_epochs)
        preset = TrainingSchedule.desk if self.schedule == "desk" else TrainingSchedule.full
        return preset(**overrides)

    def loss_config(self, dataset_size: int) -> LossConfig:
        gamma = 0 if self.mode == "transfer_distill" else self.gamma
        return LossConfig(gamma=gamma, theta=self.theta, rho=self.rho,
                          ckt_weights=CKTWeights(self.alpha1, self.alpha2),
                          critic=CriticParams(self.tau, self.num_negatives, dataset_size),
                          distill_method=self.distill_method)

    def model_spec(self, role: str, num_classes: int, input_shape) -> ModelSpec:
        arch = self.teacher_arch if role == "teacher" else self.student_arch
        return ModelSpec(parse_arch(arch), num_classes, tuple(input_shape))

    def mapping_strategy(self) -> MappingStrategy:
        return MappingStrategy(self.mapping, self.mapping_seed)

    # text form ---------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                text = ""
            elif isinstance(v, bool):
                text = "true" if v else "false"
            elif f.name == "synth_shape":
                text = "x".join(str(i) for i in v)
            elif isinstance(v, tuple):
                text = ",".join(str(i) for i in v)
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_KINDS = {
    "mode": "str", "seed": "int", "out_dir": "str", "train_data": "str", "test_data": "str",
    "synth_classes": "int", "synth_per_class": "int", "synth_test_per_class": "int",
    "synth_shape": "shape", "synth_pattern_seed": "int", "synth_seed": "int",
    "teacher_arch": "str", "student_arch": "str", "teacher_checkpoint": "str",
    "student_checkpoint": "str", "checkpoint": "str",
    "gamma": "int", "theta": "float", "alpha1": "float", "alpha2": "float", "tau": "float",
    "rho": "float", "num_negatives": "int", "distill_method": "str", "proj_kind": "str",
    "proj_dim": "int", "bank_momentum": "float", "batch_center": "bool", "mapping": "str",
    "mapping_seed": "int", "probe_size": "int", "schedule": "str",
    "base_lr": "opt_float", "decay_factor": "opt_float", "decay_epochs": "opt_ints",
    "total_epochs": "opt_int", "weight_decay": "opt_float", "momentum": "opt_float",
    "nesterov": "opt_bool", "batch_size": "int", "flip": "bool",
}
assert set(_KINDS) == {f.name for f in fields(ExperimentConfig)}

KEYS = tuple(_KINDS)


def parse_assignment(line: str, where: str = "") -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}expected key=value, got {line!r}")
    key, value = (s.strip() for s in line.split("=", 1))
    if key not in _KINDS:
        raise ConfigError(f"{where}unknown key {key!r}")
    return key, value


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, value = parse_assignment(line, f"{source}:{n}: ")
        if key in raw:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        raw[key] = value
    return raw


def build_config(raw: dict[str, str]) -> ExperimentConfig:
    values = {}
    for key, text in raw.items():
        try:
            values[key] = _PARSERS[_KINDS[key]](text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return ExperimentConfig(**values)


def load_config(path=None, overrides=(), **fixed) -> ExperimentConfig:
    """Read ``path`` (optional), apply ``key=value`` overrides, then ``fixed`` values."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        raw = parse_text(text, str(path))
    for item in overrides:
        key, value = parse_assignment(item, "--set: ")
        raw[key] = value
    cfg = build_config(raw)
    return replace(cfg, **fixed) if fixed else cfg
