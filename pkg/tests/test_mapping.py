import numpy as np
import pytest

from cktf.errors import DegenerateInputError, SpecError, UsageError
from cktf.mapping import STRATEGIES, LayerMapping, MappingStrategy, cosine_score, map_layers
from cktf.models import ModelSpec, StageSpec, build_cnn


def model(layers, width=3, seed=0):
    stages = [StageSpec(width, n, m > 0) for m, n in enumerate(layers)]
    return build_cnn(ModelSpec(stages=tuple(stages), num_classes=2, input_shape=(1, 8, 8)), seed)


PROBE = np.random.default_rng(0).random((6, 1, 8, 8))


class TestCosine:
    def test_self(self):
        a = np.random.default_rng(1).normal(size=(4, 5))
        assert cosine_score(a, a) == pytest.approx(1.0, abs=1e-15)

    def test_antipodal(self):
        a = np.random.default_rng(1).normal(size=(4, 5))
        assert cosine_score(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_score(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]])) == 0.0

    def test_zero_row(self):
        with pytest.raises(DegenerateInputError):
            cosine_score(np.zeros((1, 2)), np.ones((1, 2)))


class TestMapLayers:
    def test_teacher_last(self):
        m = map_layers(MappingStrategy("teacher_last"), model([3, 3]), model([1, 2]))
        assert m.pairs == ((2, 0), (5, 2))

    def test_teacher_first(self):
        m = map_layers(MappingStrategy("teacher_first"), model([3, 3]), model([1, 2]))
        assert m.teacher_taps == [0, 3]

    def test_teacher_random_in_range_and_seeded(self):
        t, s = model([4, 4]), model([1, 1])
        a = map_layers(MappingStrategy("teacher_random", seed=3), t, s)
        b = map_layers(MappingStrategy("teacher_random", seed=3), t, s)
        assert a == b
        assert a.teacher_taps[0] in range(0, 4) and a.teacher_taps[1] in range(4, 8)

    def test_cosine_max_finds_duplicate_layer(self):
        teacher, student = model([3], seed=1), model([2], seed=2)
        # teacher conv0 and conv1 copy the student's two convs, so teacher layer 1 equals the student's last layer
        for k in (0, 1):
            for part in ("weight", "bias"):
                teacher.params[f"stage0.conv{k}.{part}"].data = student.params[f"stage0.conv{k}.{part}"].data.copy()
        m = map_layers(MappingStrategy("cosine_max"), teacher, student, PROBE)
        assert m.teacher_taps == [1]
        assert m.scores[0][1] == pytest.approx(1.0, abs=1e-12)
        brute = [cosine_score(*_means(teacher, student, t)) for t in range(3)]
        np.testing.assert_allclose(m.scores[0], brute, atol=1e-14)

    def test_cosine_max_min_share_scores(self):
        t, s = model([3, 3], width=6, seed=4), model([1, 1], width=3, seed=5)
        hi = map_layers(MappingStrategy("cosine_max"), t, s, PROBE)
        lo = map_layers(MappingStrategy("cosine_min"), t, s, PROBE)
        assert hi.scores == lo.scores
        for m, row in enumerate(hi.scores):
            assert hi.teacher_taps[m] == 3 * m + int(np.argmax(row))
            assert lo.teacher_taps[m] == 3 * m + int(np.argmin(row))

    @pytest.mark.parametrize("kind", STRATEGIES)
    def test_invariants_hold_for_every_strategy(self, kind):
        t, s = model([2, 3], seed=6), model([2, 1], seed=7)
        m = map_layers(MappingStrategy(kind, seed=1), t, s, PROBE)
        assert m.student_taps == s.spec.last_layers()
        for mod, ti in enumerate(m.teacher_taps):
            assert ti in t.spec.module_layer_range(mod)
        assert m == map_layers(MappingStrategy(kind, seed=1), t, s, PROBE)

    def test_module_mismatch(self):
        with pytest.raises(SpecError):
            map_layers(MappingStrategy(), model([1, 1]), model([1]))

    def test_cosine_needs_probe(self):
        with pytest.raises(UsageError):
            map_layers(MappingStrategy("cosine_min"), model([2]), model([1]))

    def test_unknown_strategy(self):
        with pytest.raises(SpecError):
            MappingStrategy("teacher_middle")

    def test_serializable(self):
        m = LayerMapping(((1, 0),), ((0.5, 0.25),))
        assert m.to_dict() == {"pairs": [[1, 0]], "scores": [[0.5, 0.25]]}


def _means(teacher, student, t_idx):
    from cktf.models import forward_with_taps
    t = forward_with_taps(teacher, PROBE, tap_all=True).all_layers[t_idx].data.mean(axis=(2, 3))
    s = forward_with_taps(student, PROBE, tap_all=True).all_layers[-1].data.mean(axis=(2, 3))
    return t, s
