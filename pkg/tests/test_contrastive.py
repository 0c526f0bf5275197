import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cktf import tensor as T
from cktf.contrastive import (
    CKTWeights,
    CriticParams,
    MemoryBank,
    bank_update,
    critic_f,
    in_batch_negatives,
    l_ckt,
    l_mckt,
    l_pckt,
    log_critic,
    nce_loss,
    sample_negatives,
)
from cktf.errors import DegenerateInputError, ParameterError, ShapeError, UsageError
from cktf.projection import EmbeddingBatch, make_heads, pool_and_flatten

mpmath.mp.dps = 50


def unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def oracle_loss(u, v, negs, tau, n, n_d):
    """Eq-by-eq direct summation in 50-digit arithmetic."""
    total = mpmath.mpf(0)
    for b in range(len(u)):
        def f(w):
            e = mpmath.exp(mpmath.fsum(mpmath.mpf(float(x)) * mpmath.mpf(float(y)) for x, y in zip(u[b], w)) / tau)
            return e / (e + mpmath.mpf(n) / n_d)
        fp = f(v[b])
        total += -mpmath.log(fp / (fp + mpmath.fsum(f(w) for w in negs[b])))
    return float(total / len(u))


class TestCritic:
    def test_zero_similarity_unit_ratio(self):
        e = np.eye(3)
        assert critic_f(e[0], e[1], CriticParams(1.0, 100, 100)) == pytest.approx(0.5, abs=1e-15)

    def test_scalar_value(self):
        e = np.eye(3)[0]
        # e^2 / (e^2 + 1) by hand
        assert critic_f(e, e, CriticParams(0.5, 100, 100)) == pytest.approx(0.8807970779778823, abs=1e-15)

    @pytest.mark.parametrize("tau", [0.1, 0.05, 0.01])
    def test_small_tau_against_extended_precision(self, tau):
        e = np.eye(4)[2]
        p = CriticParams(tau, 64, 400)
        s = mpmath.mpf(1) / mpmath.mpf(tau)
        want = mpmath.exp(s) / (mpmath.exp(s) + mpmath.mpf(64) / 400)
        got = critic_f(e, e, p)
        assert math.isfinite(got)
        assert abs(got - float(want)) < 1e-12

    def test_log_critic_no_overflow(self):
        lf = log_critic(np.array([1.0, -1.0]), CriticParams(0.01, 4, 10))
        assert np.all(np.isfinite(lf)) and lf[0] <= 0

    def test_non_finite_rejected(self):
        with pytest.raises(DegenerateInputError):
            critic_f(np.array([np.nan, 0.0]), np.array([1.0, 0.0]), CriticParams())

    @pytest.mark.parametrize("kw", [{"tau": 0}, {"tau": -1}, {"num_negatives": 0}, {"dataset_size": 0}])
    def test_param_validation(self, kw):
        with pytest.raises(ParameterError):
            CriticParams(**kw)


class TestNCE:
    def test_uniform_scores_log4(self):
        u = np.tile([1.0, 0.0], (2, 1))
        negs = np.broadcast_to(u[:, None], (2, 3, 2))
        loss = nce_loss(T.Tensor(u), T.Tensor(u), negs, CriticParams(0.1, 3, 10)).item()
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_dominant_positive_antipodal_negatives(self):
        u = np.eye(4)[:1]
        negs = -np.tile(u, (3, 1))[None]
        assert nce_loss(T.Tensor(u), T.Tensor(u), negs, CriticParams(0.1, 3, 3)).item() < 1e-3

    def test_orthogonal_negatives_closed_form(self):
        # orthogonal negatives keep f = 1 / (1 + N/N_d), so the loss is bounded away from 0
        e = np.eye(4)
        p = CriticParams(0.1, 3, 3)
        f_pos = math.exp(10) / (math.exp(10) + 1)
        want = math.log(1 + 3 * 0.5 / f_pos)
        got = nce_loss(T.Tensor(e[:1]), T.Tensor(e[:1]), e[1:4][None], p).item()
        assert got == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        b, n, d, n_d, tau = 4, 5, 6, 30, 0.3
        u, v, negs = unit(rng, b, d), unit(rng, b, d), unit(rng, b, n, d)
        got = nce_loss(T.Tensor(u), T.Tensor(v), negs, CriticParams(tau, n, n_d)).item()
        assert abs(got - oracle_loss(u, v, negs, tau, n, n_d)) < 1e-10

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 2.0))
    def test_nonnegative(self, seed, tau):
        rng = np.random.default_rng(seed)
        u, v, negs = unit(rng, 3, 5), unit(rng, 3, 5), unit(rng, 3, 4, 5)
        assert nce_loss(T.Tensor(u), T.Tensor(v), negs, CriticParams(tau, 4, 50)).item() >= 0

    def test_monotone_in_positive_similarity(self):
        rng = np.random.default_rng(0)
        negs = unit(rng, 1, 6, 3)
        u = np.array([[1.0, 0.0, 0.0]])
        losses = []
        for angle in np.linspace(np.pi, 0, 12):
            v = np.array([[np.cos(angle), np.sin(angle), 0.0]])
            losses.append(nce_loss(T.Tensor(u), T.Tensor(v), negs, CriticParams(0.2, 6, 40)).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_n_mismatch(self):
        u = np.eye(2)
        with pytest.raises(UsageError):
            nce_loss(T.Tensor(u), T.Tensor(u), np.ones((2, 3, 2)) / np.sqrt(2), CriticParams(0.1, 4, 10))

    def test_index_mismatch(self):
        e = T.Tensor(np.eye(2))
        with pytest.raises(UsageError):
            nce_loss(EmbeddingBatch(e, [0, 1]), EmbeddingBatch(e, [1, 0]), np.ones((2, 1, 2)),
                     CriticParams(0.1, 1, 10))

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            nce_loss(T.Tensor(np.eye(2)), T.Tensor(np.eye(3)), np.ones((2, 1, 2)), CriticParams(0.1, 1, 10))

    def test_gradient_into_live_negatives(self):
        rng = np.random.default_rng(0)
        u, v = unit(rng, 3, 4), T.Tensor(unit(rng, 3, 4), requires_grad=True)
        negs = in_batch_negatives(v, 2, np.random.default_rng(1))
        nce_loss(T.Tensor(u), v, negs, CriticParams(0.5, 2, 10)).backward()
        assert v.grad is not None and np.abs(v.grad).sum() > 0


class TestSiteLosses:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.params = CriticParams(0.5, 4, 12)

    def test_single_site_equals_nce(self):
        heads = make_heads([3], [2], d=5, seed=1)
        bank = MemoryBank(2, 12, 5, seed=2)
        t = T.Tensor(self.rng.random((3, 3, 2, 2)))
        s = T.Tensor(self.rng.random((3, 2, 2, 2)))
        idx = np.array([0, 4, 7])
        got = l_mckt([t], [s], heads, bank, self.params, idx, np.random.default_rng(9))[0].item()
        negs = bank.sample_negatives(0, "teacher", idx, 4, np.random.default_rng(9))
        pair = heads.modules[0]
        want = nce_loss(pair.student(pool_and_flatten(s)), pair.teacher(pool_and_flatten(t)), negs,
                        self.params).item()
        assert got == want

    def test_identical_sites_equal_losses(self):
        heads = make_heads([3, 3, 3], [2, 2, 2], d=5, seed=1)
        for pair in list(heads)[1:3]:
            for side in ("teacher", "student"):
                src = getattr(heads.modules[0], side).params
                for k, p in getattr(pair, side).params.items():
                    p.data = src[k].data.copy()
        bank = MemoryBank(4, 12, 5, seed=2)
        for site in (1, 2):
            bank.slots[(site, "teacher")] = bank.slots[(0, "teacher")].copy()
        t = T.Tensor(self.rng.random((2, 3, 2, 2)))
        s = T.Tensor(self.rng.random((2, 2, 2, 2)))
        idx = np.array([1, 2])
        losses = [l_mckt([t], [s], _single(heads, m), _bank_site(bank, m), self.params, idx,
                         np.random.default_rng(4))[0].item() for m in range(3)]
        assert losses[0] == losses[1] == losses[2]

    def test_compositional_oracle_two_sites(self):
        heads = make_heads([3, 4], [2, 3], d=6, seed=3)
        bank = MemoryBank(3, 12, 6, seed=4)
        t_reps = [T.Tensor(self.rng.random((4, c, 3, 3))) for c in (3, 4)]
        s_reps = [T.Tensor(self.rng.random((4, c, 3, 3))) for c in (2, 3)]
        idx = np.array([0, 3, 5, 11])
        got = [x.item() for x in l_mckt(t_reps, s_reps, heads, bank, self.params, idx, np.random.default_rng(8))]
        draws = np.random.default_rng(8)
        for m, (t, s) in enumerate(zip(t_reps, s_reps)):
            neg_idx = bank.sample_indices(idx, 4, draws)
            negs = bank.slots[(m, "teacher")][neg_idx]
            u = _affine_unit(s.data.mean(axis=(2, 3)), heads.modules[m].student)
            v = _affine_unit(t.data.mean(axis=(2, 3)), heads.modules[m].teacher)
            assert abs(got[m] - oracle_loss(u, v, negs, 0.5, 4, 12)) < 1e-10

    def test_pckt_uniform_log8(self):
        heads = make_heads([2], [2], d=3, seed=0)
        for pair in heads:
            for h in (pair.teacher, pair.student):
                h.params["fc0.weight"].data = np.zeros((2, 3))
                h.params["fc0.bias"].data = np.array([1.0, 0.0, 0.0])
        bank = MemoryBank(2, 20, 3, seed=0)
        bank.slots[(1, "teacher")][:] = [1.0, 0.0, 0.0]
        pen = T.Tensor(self.rng.random((3, 2)))
        loss = l_pckt(pen, pen, heads, bank, CriticParams(0.1, 7, 20), [0, 1, 2], np.random.default_rng(0))
        assert loss.item() == pytest.approx(math.log(8), abs=1e-12)

    def test_pckt_brute_force(self):
        heads = make_heads([3], [2], d=5, seed=6)
        bank = MemoryBank(2, 12, 5, seed=7)
        tp, sp = self.rng.random((5, 3)), self.rng.random((5, 2))
        idx = np.arange(5)
        got = l_pckt(T.Tensor(tp), T.Tensor(sp), heads, bank, self.params, idx, np.random.default_rng(1)).item()
        negs = bank.slots[(1, "teacher")][bank.sample_indices(idx, 4, np.random.default_rng(1))]
        want = oracle_loss(_affine_unit(sp, heads.penultimate.student), _affine_unit(tp, heads.penultimate.teacher),
                           negs, 0.5, 4, 12)
        assert abs(got - want) < 1e-10

    def test_module_count_mismatch(self):
        heads = make_heads([3, 3], [2, 2], d=4)
        t = T.Tensor(np.ones((2, 3, 2, 2)))
        with pytest.raises(UsageError):
            l_mckt([t], [t], heads, None, self.params)


def _affine_unit(x, head):
    h = x @ head.params["fc0.weight"].data + head.params["fc0.bias"].data
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def _single(heads, m):
    from cktf.projection import HeadSet
    return HeadSet([heads.modules[m]], heads.penultimate)


def _bank_site(bank, m):
    b = MemoryBank(2, bank.dataset_size, bank.dim, seed=0)
    b.slots[(0, "teacher")] = bank.slots[(m, "teacher")]
    return b


class TestLCKT:
    def test_arithmetic(self):
        got = l_ckt([T.as_tensor(1.0), T.as_tensor(1.0)], T.as_tensor(2.0), CKTWeights(0.8, 0.2))
        assert got.item() == pytest.approx(2.0, abs=1e-15)

    def test_alpha1_zero(self):
        got = l_ckt([T.as_tensor(5.0)], T.as_tensor(3.0), CKTWeights(0.0, 0.2))
        assert got.item() == pytest.approx(0.6, abs=1e-15)

    def test_alpha2_zero(self):
        got = l_ckt([T.as_tensor(2.5)], T.as_tensor(9.0), CKTWeights(0.8, 0.0))
        assert got.item() == pytest.approx(2.0, abs=1e-15)

    @pytest.mark.parametrize("bad", [-0.1, float("inf"), float("nan")])
    def test_weight_validation(self, bad):
        with pytest.raises(ParameterError):
            CKTWeights(bad, 0.2)


class TestBank:
    def test_slots_unit_norm(self):
        bank = MemoryBank(3, 50, 8, seed=0)
        for v in bank.slots.values():
            np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9)
        assert len(bank.slots) == 6

    def test_zero_momentum_copies(self):
        bank = MemoryBank(1, 4, 2, momentum=0.0)
        e = np.array([[0.6, 0.8]])
        bank_update(bank, 0, "student", EmbeddingBatch(T.Tensor(e), [2]))
        np.testing.assert_allclose(bank.slots[(0, "student")][2], e[0], atol=1e-15)

    def test_fixed_point(self):
        bank = MemoryBank(1, 4, 2, momentum=0.7)
        e = bank.slots[(0, "teacher")][1:2].copy()
        bank_update(bank, 0, "teacher", EmbeddingBatch(T.Tensor(e), [1]))
        np.testing.assert_allclose(bank.slots[(0, "teacher")][1], e[0], atol=1e-15)

    def test_half_momentum_hand_arithmetic(self):
        bank = MemoryBank(1, 2, 2, momentum=0.5)
        bank.slots[(0, "teacher")][0] = [1.0, 0.0]
        bank_update(bank, 0, "teacher", EmbeddingBatch(T.Tensor(np.array([[0.0, 1.0]])), [0]))
        np.testing.assert_allclose(bank.slots[(0, "teacher")][0], [math.sqrt(0.5)] * 2, atol=1e-15)

    def test_only_own_slot_updated(self):
        bank = MemoryBank(1, 5, 3, momentum=0.5, seed=1)
        before = bank.slots[(0, "teacher")].copy()
        bank_update(bank, 0, "teacher", EmbeddingBatch(T.Tensor(np.eye(3)[:1]), [3]))
        after = bank.slots[(0, "teacher")]
        changed = np.where(np.any(before != after, axis=1))[0]
        assert changed.tolist() == [3]

    def test_out_of_range(self):
        bank = MemoryBank(1, 3, 2)
        with pytest.raises(UsageError):
            bank.update(0, "teacher", np.array([[1.0, 0.0]]), [3])
        with pytest.raises(UsageError):
            bank.update(5, "teacher", np.array([[1.0, 0.0]]), [0])

    def test_staged_updates_apply_on_commit(self):
        bank = MemoryBank(1, 3, 2, momentum=0.0)
        before = bank.slots[(0, "teacher")].copy()
        bank.stage(0, "teacher", EmbeddingBatch(T.Tensor(np.array([[1.0, 0.0]])), [0]))
        np.testing.assert_array_equal(bank.slots[(0, "teacher")], before)
        bank.commit()
        np.testing.assert_array_equal(bank.slots[(0, "teacher")][0], [1.0, 0.0])

    def test_momentum_range(self):
        with pytest.raises(ParameterError):
            MemoryBank(1, 3, 2, momentum=1.0)


class TestSampling:
    def test_exhaustive(self):
        bank = MemoryBank(1, 6, 2)
        idx = bank.sample_indices([2, 5], 5, np.random.default_rng(0))
        assert sorted(idx[0]) == [0, 1, 3, 4, 5]
        assert sorted(idx[1]) == [0, 1, 2, 3, 4]

    def test_never_contains_anchor(self):
        bank = MemoryBank(1, 12, 2)
        rng = np.random.default_rng(0)
        anchors = rng.integers(0, 12, size=10_000)
        idx = bank.sample_indices(anchors, 3, rng)
        assert not np.any(idx == anchors[:, None])
        assert all(len(set(r)) == 3 for r in idx[:500])

    def test_deterministic(self):
        bank = MemoryBank(1, 30, 4, seed=3)
        a = sample_negatives(bank, 0, "teacher", [1, 2], 7, np.random.default_rng(5))
        b = sample_negatives(bank, 0, "teacher", [1, 2], 7, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes() and a.shape == (2, 7, 4)

    def test_too_many(self):
        bank = MemoryBank(1, 5, 2)
        with pytest.raises(ParameterError):
            bank.sample_indices([0], 5, np.random.default_rng(0))

    def test_roughly_uniform(self):
        bank = MemoryBank(1, 5, 2)
        idx = bank.sample_indices(np.zeros(8000, dtype=int), 1, np.random.default_rng(0)).ravel()
        counts = np.bincount(idx, minlength=5)
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] / 8000 - 0.25) < 0.02)
