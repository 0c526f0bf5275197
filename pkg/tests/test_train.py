import numpy as np
import pytest

from cktf.contrastive import CKTWeights, CriticParams
from cktf.data import BatchStream, make_synthetic
from cktf.errors import SpecError, UsageError
from cktf.gradcheck import check_params
from cktf.losses import LossConfig, cross_entropy, kd_kl, total_loss
from cktf.models import ModelSpec, StageSpec, build_cnn, forward_with_taps
from cktf.optim import SGD, TrainingSchedule, lr_at_epoch
from cktf.train import accuracy, evaluate, fit_linear, fit_supervised, run_distillation
from cktf import tensor as T

SHAPE = (1, 8, 8)


def spec(*stages, classes=4):
    return ModelSpec(stages=stages, num_classes=classes, input_shape=SHAPE)


def teacher_spec(classes=4):
    return spec(StageSpec(8, 2), StageSpec(12, 1, True), classes=classes)


def student_spec(classes=4):
    return spec(StageSpec(3), StageSpec(5, 1, True), classes=classes)


@pytest.fixture(scope="module")
def data():
    return make_synthetic(4, 40, SHAPE, seed=1, pattern_seed=0), make_synthetic(4, 10, SHAPE, seed=2, pattern_seed=0)


def short(epochs=2):
    return TrainingSchedule.desk(decay_epochs=(), total_epochs=epochs)


class TestAccuracy:
    def test_constant_predictor(self):
        logits = np.zeros((8, 4))
        logits[:, 2] = 1
        assert accuracy(logits, np.repeat(np.arange(4), 2)) == 0.25

    def test_one_hot_labels(self):
        y = np.array([0, 3, 1, 2, 2])
        assert accuracy(np.eye(4)[y], y) == 1.0

    def test_random_logits(self):
        rng = np.random.default_rng(0)
        assert abs(accuracy(rng.normal(size=(10_000, 10)), rng.integers(0, 10, 10_000)) - 0.1) < 0.01

    def test_evaluate_needs_labels(self, data):
        with pytest.raises(UsageError):
            evaluate(build_cnn(student_spec(), 0), data[0].unlabeled())


class TestSupervised:
    def test_one_record_per_epoch(self, data):
        res = fit_supervised(build_cnn(student_spec(), 0), *data, short(3))
        assert [r.epoch for r in res.metrics] == [0, 1, 2]
        assert res.metrics[0].lr == 0.05 and res.metrics[0].test_acc is not None

    def test_zero_epochs_keeps_init(self, data):
        m = build_cnn(student_spec(), 0)
        init = {k: v.copy() for k, v in m.state_dict().items()}
        fit_supervised(m, *data, TrainingSchedule.desk(decay_epochs=(), total_epochs=0))
        assert all(init[k].tobytes() == v.tobytes() for k, v in m.state_dict().items())

    def test_needs_labels(self, data):
        with pytest.raises(UsageError):
            fit_supervised(build_cnn(student_spec(), 0), data[0].unlabeled(), None, short())


class TestDistillation:
    def test_teacher_bitwise_frozen_and_heads_trained(self, data):
        teacher = build_cnn(teacher_spec(), 0)
        before = {k: v.copy() for k, v in teacher.state_dict().items()}
        cfg = LossConfig(critic=CriticParams(0.1, 16, len(data[0])))
        res = run_distillation(teacher, build_cnn(student_spec(), 1), *data, cfg, short(1), proj_dim=16)
        assert all(before[k].tobytes() == v.tobytes() for k, v in teacher.state_dict().items())
        init = build_cnn(student_spec(), 1)
        assert not np.array_equal(init.params["stage0.conv0.weight"].data,
                                  res.model.params["stage0.conv0.weight"].data)
        assert set(res.metrics[0].losses) == {"total", "ce", "ckt", "distill", "mckt0", "mckt1", "pckt"}
        for r in res.metrics:
            L = r.losses
            assert abs(L["total"] - (L["ce"] + L["ckt"])) < 1e-12

    def test_teacher_heads_can_be_frozen(self, data):
        cfg = LossConfig(critic=CriticParams(0.1, 16, len(data[0])))
        args = (build_cnn(teacher_spec(), 0), build_cnn(student_spec(), 1), *data, cfg, short(1))
        frozen = run_distillation(*args, proj_dim=16, train_teacher_heads=False).heads
        trained = run_distillation(*args, proj_dim=16).heads
        init = frozen.modules[0].teacher.params["fc0.weight"].data
        fresh = run_distillation(*args[:-1], TrainingSchedule.desk(decay_epochs=(), total_epochs=0),
                                 proj_dim=16).heads
        assert init.tobytes() == fresh.modules[0].teacher.params["fc0.weight"].data.tobytes()
        assert not np.array_equal(trained.modules[0].teacher.params["fc0.weight"].data, init)
        assert not np.array_equal(frozen.modules[0].student.params["fc0.weight"].data,
                                  fresh.modules[0].student.params["fc0.weight"].data)

    def test_transfer_regime_ce_zero(self, data):
        cfg = LossConfig(gamma=0, critic=CriticParams(0.1, 16, len(data[0])))
        res = run_distillation(build_cnn(teacher_spec(), 0), build_cnn(student_spec(), 1), data[0].unlabeled(),
                               None, cfg, short(2), proj_dim=16)
        for r in res.metrics:
            assert r.losses["ce"] == 0.0 and r.losses["total"] == r.losses["ckt"]
            assert r.train_acc is None and r.test_acc is None

    def test_single_sample_tail_with_centred_heads(self):
        train = make_synthetic(3, 11, SHAPE, seed=1)  # 33 samples: batches of 32 and 1
        cfg = LossConfig(critic=CriticParams(0.1, 8, len(train)))
        res = run_distillation(build_cnn(teacher_spec(3), 0), build_cnn(student_spec(3), 1), train, None,
                               cfg, short(1), proj_dim=8)
        assert np.isfinite(res.metrics[0].losses["total"])

    def test_module_count_mismatch(self, data):
        cfg = LossConfig(critic=CriticParams(0.1, 16, len(data[0])))
        with pytest.raises(SpecError):
            run_distillation(build_cnn(teacher_spec(), 0), build_cnn(spec(StageSpec(3)), 1), *data, cfg, short(1))

    def test_dataset_size_must_match_critic(self, data):
        with pytest.raises(SpecError):
            run_distillation(build_cnn(teacher_spec(), 0), build_cnn(student_spec(), 1), *data,
                             LossConfig(critic=CriticParams(0.1, 16, 99)), short(1))

    def test_labels_required_for_gamma_one(self, data):
        with pytest.raises(UsageError):
            run_distillation(build_cnn(teacher_spec(), 0), build_cnn(student_spec(), 1), data[0].unlabeled(),
                             None, LossConfig(critic=CriticParams(0.1, 16, len(data[0]))), short(1))

    def test_kd_only_matches_standalone_loop(self, data):
        train = data[0]
        teacher = build_cnn(teacher_spec(), 0)
        cfg = LossConfig(gamma=1, theta=1.0, ckt_weights=CKTWeights(0.0, 0.0),
                         critic=CriticParams(0.1, 16, len(train)))
        res = run_distillation(teacher, build_cnn(student_spec(), 1), train, None, cfg, short(2), seed=3)

        student = build_cnn(student_spec(), 1)
        opt = SGD(student.parameters(), short(2))
        stream = BatchStream(train, 32, seed=3)
        for epoch in range(2):
            for x, y, _ in stream.batches(epoch):
                s = forward_with_taps(student, x)
                t = forward_with_taps(teacher, x)
                loss = cross_entropy(y, s.logits) + kd_kl(t.logits, s.logits, 4.0)
                opt.zero_grad()
                loss.backward()
                opt.step(epoch, lr_at_epoch(opt.schedule, epoch))
        for k, v in student.state_dict().items():
            assert res.model.state_dict()[k].tobytes() == v.tobytes()


class TestLinear:
    def test_backbone_bitwise_frozen_and_curve_emitted(self, data):
        m = build_cnn(student_spec(), 2)
        before = {k: v.copy() for k, v in m.state_dict().items() if not k.startswith("classifier.")}
        res = fit_linear(m, *data, short(3))
        after = m.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)
        assert len(res.metrics) == 3 and all(r.test_acc is not None for r in res.metrics)
        assert res.final_test_acc == evaluate(m, data[1])

    def test_classifier_gradient_check(self, data):
        m = build_cnn(student_spec(), 2)
        x, y = data[0].images[:6], data[0].labels[:6]
        feats = forward_with_taps(m, x).penultimate.data
        w, b = m.classifier_parameters()
        report = check_params(lambda: cross_entropy(y, T.affine(T.Tensor(feats), w, b)), [w, b])
        assert max(report.values()) < 1e-5

    def test_needs_labels(self, data):
        with pytest.raises(UsageError):
            fit_linear(build_cnn(student_spec(), 0), data[0].unlabeled(), None, short())
