"""Config-driven runs: load data and checkpoints, train, write results.

Every run writes into ``cfg.out_dir``:

``config.txt``
    the fully resolved configuration (same format as the input file).
``metrics.tsv``
    one tab-separated row per epoch after a header row. Columns, in order:
    ``epoch lr total ce ckt distill mckt0 .. mckt{M-1} pckt train_acc test_acc``.
    Reals use ``repr`` so rows round-trip exactly; a missing accuracy is ``NA``.
``timing.tsv``
    ``epoch seconds`` per epoch. Wall-clock time lives here so the other
    files are bitwise reproducible.
``summary.json``
    mode, seed, epoch count, final accuracies, checkpoint name and mapping.
``teacher.ckpt`` / ``student.ckpt`` / ``linear.ckpt``
    model checkpoints; distilled students carry their projection heads as
    discardable tensors.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, load_dataset, make_synthetic
from .errors import SpecError, UsageError
from .models import build_cnn, load_model, save_model
from .train import MetricsRecord, RunResult, evaluate, fit_linear, fit_supervised, run_distillation

log = logging.getLogger(__name__)

CHECKPOINTS = {"train_teacher": "teacher.ckpt", "distill": "student.ckpt",
               "transfer_distill": "student.ckpt", "finetune_linear": "linear.ckpt"}


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    if cfg.train_data:
        train = load_dataset(cfg.train_data)
        test = load_dataset(cfg.test_data) if cfg.test_data else None
    else:
        kw = dict(shape=cfg.synth_shape, pattern_seed=cfg.synth_pattern_seed)
        train = make_synthetic(cfg.synth_classes, cfg.synth_per_class, seed=cfg.synth_seed,
                               split="train", **kw)
        test = make_synthetic(cfg.synth_classes, cfg.synth_test_per_class, seed=cfg.synth_seed + 1,
                              split="test", **kw)
    return train, test


def metric_columns(num_modules: int) -> list[str]:
    return (["epoch", "lr", "total", "ce", "ckt", "distill"]
            + [f"mckt{m}" for m in range(num_modules)] + ["pckt", "train_acc", "test_acc"])


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(out_dir, metrics: list[MetricsRecord], num_modules: int) -> None:
    out = Path(out_dir)
    cols = metric_columns(num_modules)
    rows = ["\t".join(cols)]
    for r in metrics:
        values = {"epoch": r.epoch, "lr": r.lr, "train_acc": r.train_acc, "test_acc": r.test_acc}
        values.update({k: r.losses.get(k, 0.0) for k in cols[2:-2]})
        rows.append("\t".join(_fmt(values[c]) for c in cols))
    (out / "metrics.tsv").write_text("\n".join(rows) + "\n")
    timing = ["epoch\tseconds"] + [f"{r.epoch}\t{r.seconds:.6f}" for r in metrics]
    (out / "timing.tsv").write_text("\n".join(timing) + "\n")


def read_metrics(path) -> list[dict[str, float | None]]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    return [{c: (None if v == "NA" else (int(v) if c == "epoch" else float(v)))
             for c, v in zip(cols, line.split("\t"))} for line in lines[1:]]


def _finish(cfg: ExperimentConfig, result: RunResult, ckpt_name: str | None,
            extra_summary: dict | None = None) -> RunResult:
    out = Path(cfg.out_dir)
    write_metrics(out, result.metrics, result.model.spec.num_modules)
    summary = {
        "mode": cfg.mode, "seed": cfg.seed, "epochs": len(result.metrics),
        "final_train_acc": result.metrics[-1].train_acc if result.metrics else None,
        "final_test_acc": result.final_test_acc,
        "checkpoint": ckpt_name,
        "mapping": result.mapping.to_dict() if result.mapping is not None else None,
    }
    summary.update(extra_summary or {})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def _prepare(cfg: ExperimentConfig) -> Path:
    cfg.validate_for_mode()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def train_teacher(cfg: ExperimentConfig) -> RunResult:
    out = _prepare(cfg)
    train, test = load_data(cfg)
    if train.labels is None:
        raise UsageError("train_teacher needs a labeled dataset")
    model = build_cnn(cfg.model_spec("teacher", train.num_classes, train.shape), cfg.seed)
    result = fit_supervised(model, train, test, cfg.training_schedule(), cfg.batch_size,
                            cfg.seed, cfg.flip)
    save_model(model, out / CHECKPOINTS["train_teacher"], meta={"role": "teacher", "taps": model.taps})
    return _finish(cfg, result, CHECKPOINTS["train_teacher"])


def distill(cfg: ExperimentConfig) -> RunResult:
    """Distill into a fresh student; ``transfer_distill`` mode forces gamma = 0."""
    out = _prepare(cfg)
    train, test = load_data(cfg)
    if cfg.mode == "transfer_distill":
        # labels are never read and the classifier stays untrained
        train, test = train.unlabeled(), None
    teacher = load_model(cfg.teacher_checkpoint)
    if teacher.spec.input_shape != train.shape:
        raise SpecError(f"teacher expects {teacher.spec.input_shape} inputs, data is {train.shape}")
    student = build_cnn(cfg.model_spec("student", train.num_classes, train.shape), cfg.seed)
    result = run_distillation(
        teacher, student, train, test, cfg.loss_config(len(train)), cfg.training_schedule(),
        strategy=cfg.mapping_strategy(), batch_size=cfg.batch_size, seed=cfg.seed,
        proj_kind=cfg.proj_kind, proj_dim=cfg.proj_dim, bank_momentum=cfg.bank_momentum,
        flip=cfg.flip, probe_size=cfg.probe_size, batch_center=cfg.batch_center)
    name = CHECKPOINTS[cfg.mode]
    heads = result.heads.state_dict() if result.heads is not None else None
    save_model(student, out / name, extra=heads,
               meta={"role": "student", "taps": list(result.mapping.student_taps)})
    return _finish(cfg, result, name)


def transfer_distill(cfg: ExperimentConfig) -> RunResult:
    if cfg.mode != "transfer_distill":
        raise UsageError(f"transfer_distill called with mode {cfg.mode}")
    return distill(cfg)


def finetune_linear(cfg: ExperimentConfig) -> RunResult:
    out = _prepare(cfg)
    train, test = load_data(cfg)
    model = load_model(cfg.student_checkpoint)
    if model.spec.num_classes != train.num_classes:
        raise SpecError(f"checkpoint has {model.spec.num_classes} classes, data has {train.num_classes}")
    result = fit_linear(model, train, test, cfg.training_schedule(), cfg.batch_size, cfg.seed)
    save_model(model, out / CHECKPOINTS["finetune_linear"], meta={"role": "linear", "taps": model.taps})
    return _finish(cfg, result, CHECKPOINTS["finetune_linear"])


def evaluate_checkpoint(cfg: ExperimentConfig) -> dict:
    out = _prepare(cfg)
    train, test = load_data(cfg)
    model = load_model(cfg.checkpoint)
    result = {"mode": "eval", "checkpoint": cfg.checkpoint,
              "train_acc": evaluate(model, train) if train.labels is not None else None,
              "test_acc": evaluate(model, test) if test is not None and test.labels is not None else None}
    (out / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


RUNNERS = {"train_teacher": train_teacher, "distill": distill, "transfer_distill": transfer_distill,
           "finetune_linear": finetune_linear, "eval": evaluate_checkpoint}


def run(cfg: ExperimentConfig):
    return RUNNERS[cfg.mode](cfg)
