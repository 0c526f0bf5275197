"""Training loops: supervised teacher training, contrastive distillation,
unlabeled transfer distillation and linear-probe fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .contrastive import MemoryBank
from .data import BatchStream, Dataset
from .errors import SpecError, UsageError
from .losses import LossConfig, cross_entropy, total_loss
from .mapping import LayerMapping, MappingStrategy, map_layers
from .models import Model, forward_with_taps, freeze
from .optim import SGD, TrainingSchedule, lr_at_epoch
from .projection import HeadSet, make_heads

log = logging.getLogger(__name__)

LOSS_FIELDS = ("total", "ce", "ckt", "distill", "pckt")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    losses: dict[str, float]
    train_acc: float | None
    test_acc: float | None
    seconds: float = 0.0


@dataclass
class RunResult:
    model: Model
    metrics: list[MetricsRecord]
    heads: HeadSet | None = None
    bank: MemoryBank | None = None
    mapping: LayerMapping | None = None
    extras: dict = field(default_factory=dict)

    @property
    def final_test_acc(self) -> float | None:
        return self.metrics[-1].test_acc if self.metrics else None


def accuracy(logits, labels) -> float:
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return int((logits.argmax(axis=1) == labels).sum()) / labels.size


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(forward_with_taps(model, images[s:s + batch_size]).logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    if dataset.labels is None:
        raise UsageError("evaluation needs a labeled dataset")
    return accuracy(predict_logits(model, dataset.images, batch_size), dataset.labels)


def _mean_rows(rows: list[dict[str, float]]) -> dict[str, float]:
    keys = list(rows[0]) if rows else list(LOSS_FIELDS)
    return {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in keys}


def fit_supervised(model: Model, train: Dataset, test: Dataset | None, schedule: TrainingSchedule,
                   batch_size: int = 32, seed: int = 0, flip: bool = False) -> RunResult:
    """Cross-entropy training of every trainable parameter of ``model``."""
    if train.labels is None:
        raise UsageError("supervised training needs labels")
    opt = SGD(model.parameters(), schedule)
    stream = BatchStream(train, batch_size, seed=seed, flip=flip)
    metrics = []
    for epoch in range(schedule.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(schedule, epoch)
        rows, correct = [], 0
        for x, y, _ in stream.batches(epoch):
            out = forward_with_taps(model, x)
            loss = cross_entropy(y, out.logits)
            opt.zero_grad()
            loss.backward()
            opt.step(epoch, lr)
            rows.append({"total": loss.item(), "ce": loss.item(), "ckt": 0.0, "distill": 0.0, "pckt": 0.0})
            correct += int((out.logits.data.argmax(axis=1) == y).sum())
        test_acc = evaluate(model, test) if test is not None else None
        metrics.append(MetricsRecord(epoch, lr, _mean_rows(rows), correct / len(train), test_acc,
                                     time.perf_counter() - t0))
        log.debug("epoch %d lr %.3g loss %.4f test %s", epoch, lr, metrics[-1].losses["total"], test_acc)
    return RunResult(model, metrics)


def run_distillation(teacher: Model, student: Model, train: Dataset, test: Dataset | None,
                     loss_cfg: LossConfig, schedule: TrainingSchedule,
                     strategy: MappingStrategy = MappingStrategy(), batch_size: int = 32,
                     seed: int = 0, proj_kind: str = "linear", proj_dim: int = 128,
                     bank_momentum: float = 0.5, flip: bool = False,
                     probe_size: int = 64, center_heads: bool = True,
                     train_teacher_heads: bool = True, batch_center: bool = True,
                     on_step=None) -> RunResult:
    """Train ``student`` on the composite objective against a frozen ``teacher``.

    With ``loss_cfg.gamma == 0`` labels are never read, so ``train`` may be
    unlabeled. The negatives come from a memory bank sized to ``train``.
    ``on_step(params)``, if given, sees the optimised parameters after each
    backward pass and before the update.
    """
    t_spec, s_spec = teacher.spec, student.spec
    if t_spec.num_modules != s_spec.num_modules:
        raise SpecError(f"teacher has {t_spec.num_modules} modules, student {s_spec.num_modules}")
    if loss_cfg.gamma and train.labels is None:
        raise UsageError("gamma = 1 needs a labeled training set")
    if loss_cfg.critic.dataset_size != len(train):
        raise SpecError(f"critic dataset_size {loss_cfg.critic.dataset_size} != {len(train)} training samples")
    freeze(teacher)

    probe = train.images[:probe_size]
    mapping = map_layers(strategy, teacher, student, probe)
    w = loss_cfg.ckt_weights
    contrastive = w.alpha1 > 0 or w.alpha2 > 0
    heads = bank = None
    if contrastive:
        heads = make_heads([s.channels for s in t_spec.stages], [s.channels for s in s_spec.stages],
                           d=proj_dim, kind=proj_kind, seed=seed + 1,
                           teacher_pen_dim=teacher.penultimate_dim, student_pen_dim=student.penultimate_dim,
                           batch_center=batch_center)
        bank = MemoryBank(s_spec.num_modules + 1, len(train), proj_dim, bank_momentum, seed=seed + 2)
        if center_heads:
            heads.center(forward_with_taps(teacher, probe, taps=mapping.teacher_taps),
                         forward_with_taps(student, probe, taps=mapping.student_taps))

        if not train_teacher_heads:
            for pair in heads:
                for p in pair.teacher.parameters():
                    p.requires_grad = False

    student_params = student.parameters()
    if not loss_cfg.gamma and not loss_cfg.theta:
        # nothing reads the logits, so the classifier never receives a gradient
        student_params = [p for p in student_params if not p.name.startswith("classifier.")]
    params = student_params + ([p for p in heads.parameters() if p.requires_grad] if heads else [])
    opt = SGD(params, schedule)
    # batch-centred heads cannot take a single-row batch
    stream = BatchStream(train, batch_size, seed=seed, flip=flip, min_batch=2 if contrastive and batch_center else 1)
    neg_rng = np.random.default_rng([seed, 3])
    metrics = []
    for epoch in range(schedule.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(schedule, epoch)
        rows, correct = [], 0
        for x, y, idx in stream.batches(epoch):
            t_out = forward_with_taps(teacher, x, taps=mapping.teacher_taps)
            s_out = forward_with_taps(student, x, taps=mapping.student_taps)
            labels = y if loss_cfg.gamma else None
            br = total_loss(labels, s_out, t_out, heads, bank, loss_cfg, sample_indices=idx, rng=neg_rng)
            opt.zero_grad()
            br.total.backward()
            if on_step is not None:
                on_step(params)
            opt.step(epoch, lr)
            if bank is not None:
                bank.commit()
            rows.append(br.as_floats())
            if y is not None:
                correct += int((s_out.logits.data.argmax(axis=1) == y).sum())
        train_acc = correct / len(train) if train.labels is not None else None
        test_acc = evaluate(student, test) if test is not None and test.labels is not None else None
        metrics.append(MetricsRecord(epoch, lr, _mean_rows(rows), train_acc, test_acc,
                                     time.perf_counter() - t0))
    return RunResult(student, metrics, heads=heads, bank=bank, mapping=mapping)


def fit_linear(model: Model, train: Dataset, test: Dataset | None, schedule: TrainingSchedule,
               batch_size: int = 32, seed: int = 0) -> RunResult:
    """Reinitialize and train only the classifier on a frozen backbone."""
    if train.labels is None:
        raise UsageError("linear fine-tuning needs labels")
    freeze(model, names=[n for n in model.params if not n.startswith("classifier.")])
    model.reset_classifier(np.random.default_rng([seed, 4]))
    # the backbone is frozen so its penultimate features are constants
    feats_train = _penultimate(model, train.images)
    feats_test = _penultimate(model, test.images) if test is not None else None
    w, b = model.classifier_parameters()
    opt = SGD([w, b], schedule)
    stream = BatchStream(train, batch_size, seed=seed)
    metrics = []
    for epoch in range(schedule.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(schedule, epoch)
        rows, correct = [], 0
        for _, y, idx in stream.batches(epoch):
            logits = T.affine(T.Tensor(feats_train[idx]), w, b)
            loss = cross_entropy(y, logits)
            opt.zero_grad()
            loss.backward()
            opt.step(epoch, lr)
            rows.append({"total": loss.item(), "ce": loss.item(), "ckt": 0.0, "distill": 0.0, "pckt": 0.0})
            correct += int((logits.data.argmax(axis=1) == y).sum())
        test_acc = None
        if feats_test is not None and test.labels is not None:
            test_acc = accuracy(feats_test @ w.data + b.data, test.labels)
        metrics.append(MetricsRecord(epoch, lr, _mean_rows(rows), correct / len(train), test_acc,
                                     time.perf_counter() - t0))
    return RunResult(model, metrics)


def _penultimate(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([forward_with_taps(model, images[s:s + batch_size]).penultimate.data
                           for s in range(0, len(images), batch_size)])
