"""Self-checks behind the ``gradcheck`` and ``oracle-check`` subcommands.

Each check returns a :class:`CheckResult`; a suite passes when all do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .contrastive import CKTWeights, CriticParams, MemoryBank, critic_f, l_mckt, l_pckt, nce_loss
from .gradcheck import check_params, finite_diff_check
from .losses import LossConfig, cross_entropy, kd_kl, total_loss
from .models import ModelSpec, StageSpec, build_cnn, forward_with_taps, freeze
from .projection import make_heads, pool_and_flatten

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-10
ANCHOR_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.value:.3e} (tol {self.tol:g})"


def _unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# finite differences ----------------------------------------------------------

def _sq(t):
    return (t * t).sum()


def op_gradchecks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 2, 3, 3))
    x4 = rng.normal(size=(2, 2, 5, 5))
    aw = rng.normal(size=(4, 3))
    ab = rng.normal(size=3)
    probe = rng.normal(size=(2, 3, 5, 5))
    # keep relu inputs away from the kink so central differences are exact enough
    r = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    cases = {
        "conv2d/input": (lambda t: (T.conv2d(t, T.Tensor(w), stride=1, padding=1) * probe).sum(), x4),
        "conv2d/weight": (lambda t: _sq(T.conv2d(T.Tensor(x4), t, stride=2, padding=1)), w),
        "global_avg_pool": (lambda t: _sq(T.global_avg_pool(t)), x4),
        "affine/input": (lambda t: _sq(T.affine(t, T.Tensor(aw), T.Tensor(ab))), rng.normal(size=(2, 4))),
        "affine/weight": (lambda t: _sq(T.affine(T.Tensor(rng_fixed(seed, 2, 4)), t, T.Tensor(ab))), aw),
        "affine/bias": (lambda t: _sq(T.affine(T.Tensor(rng_fixed(seed, 2, 4)), T.Tensor(aw), t)), ab),
        "relu": (lambda t: _sq(T.relu(t)), r),
        "log_softmax": (lambda t: (T.log_softmax(t, 2.0) * T.Tensor(rng_fixed(seed + 1, 3, 5))).sum(),
                        rng.normal(size=(3, 5))),
        "l2_normalize": (lambda t: (T.l2_normalize(t) * T.Tensor(rng_fixed(seed + 2, 3, 4))).sum(),
                         rng.normal(size=(3, 4))),
        "cross_entropy": (lambda t: cross_entropy([0, 2, 1], t), rng.normal(size=(3, 4))),
        "kd_kl": (lambda t: kd_kl(rng_fixed(seed + 3, 3, 4), t, 4.0), rng.normal(size=(3, 4))),
    }
    params = CriticParams(tau=0.5, num_negatives=3, dataset_size=10)
    pos = _unit(rng, 2, 6)
    neg = _unit(rng, 2, 3, 6)
    cases["nce_loss/anchor"] = (lambda t: nce_loss(T.l2_normalize(t), T.Tensor(pos), neg, params),
                                rng.normal(size=(2, 6)))
    cases["nce_loss/positive"] = (lambda t: nce_loss(T.Tensor(pos), T.l2_normalize(t), neg, params),
                                  rng.normal(size=(2, 6)))
    return [CheckResult(f"grad {name}", finite_diff_check(fn, point), GRAD_TOL)
            for name, (fn, point) in cases.items()]


def rng_fixed(seed: int, *shape) -> np.ndarray:
    return np.random.default_rng([seed, 99]).normal(size=shape)


def composite_gradcheck(seed: int = 0, batch_center: bool = False) -> list[CheckResult]:
    """Full objective with gamma=1, theta=1, alpha=(0.8, 0.2), M=2, d=8, N=4, B=2."""
    spec = lambda *st: ModelSpec(stages=st, num_classes=3, input_shape=(1, 6, 6))
    teacher = freeze(build_cnn(spec(StageSpec(4, 1), StageSpec(6, 1, True)), seed))
    student = build_cnn(spec(StageSpec(2, 1), StageSpec(3, 1, True)), seed + 1)
    x = np.random.default_rng(seed).random((2, 1, 6, 6))
    heads = make_heads([4, 6], [2, 3], d=8, seed=seed, batch_center=batch_center)
    bank = MemoryBank(3, 10, 8, seed=seed)
    cfg = LossConfig(gamma=1, theta=1.0, ckt_weights=CKTWeights(0.8, 0.2),
                     critic=CriticParams(0.1, 4, 10))
    t_out = forward_with_taps(teacher, x)

    def loss():
        br = total_loss([0, 2], forward_with_taps(student, x), t_out, heads, bank, cfg,
                        sample_indices=[3, 7], rng=np.random.default_rng(seed + 5))
        bank.discard_pending()
        return br.total

    report = check_params(loss, student.parameters() + heads.parameters())
    tag = "batch-centred heads" if batch_center else "affine heads"
    return [CheckResult(f"grad composite ({tag}) {name}", err, GRAD_TOL) for name, err in report.items()]


def gradcheck_suite(seed: int = 0) -> list[CheckResult]:
    return op_gradchecks(seed) + composite_gradcheck(seed) + composite_gradcheck(seed, batch_center=True)


# brute-force oracle ----------------------------------------------------------

def brute_site_loss(anchor: np.ndarray, positive: np.ndarray, negatives: np.ndarray,
                    tau: float, n: int, n_d: int) -> float:
    """Direct summation with the critic written out literally, one sample at a time."""
    total = 0.0
    for b in range(anchor.shape[0]):
        def f(v):
            e = math.exp(sum(float(anchor[b, k]) * float(v[k]) for k in range(anchor.shape[1])) / tau)
            return e / (e + n / n_d)
        fp = f(positive[b])
        denom = fp + sum(f(negatives[b, j]) for j in range(negatives.shape[1]))
        total += -math.log(fp / denom)
    return total / anchor.shape[0]


def _hand_project(head, flat: np.ndarray) -> np.ndarray:
    if head.batch_center:
        h = (flat - flat.mean(axis=0)) @ head.params["fc0.weight"].data
    else:
        h = flat @ head.params["fc0.weight"].data + head.params["fc0.bias"].data
    return h / np.sqrt((h * h).sum(axis=1, keepdims=True))


def _oracle_instance(rng, batch_center: bool = False) -> float:
    b = int(rng.integers(2 if batch_center else 1, 9))
    n = int(rng.integers(1, 17))
    d = int(rng.integers(2, 17))
    n_d = int(rng.integers(max(n + 1, b), 4 * n + 20))
    tau = float(rng.uniform(0.2, 1.0))
    params = CriticParams(tau, n, n_d)
    t_dims = [int(v) for v in rng.integers(2, 6, size=2)]
    s_dims = [int(v) for v in rng.integers(2, 6, size=2)]
    heads = make_heads(t_dims, s_dims, d=d, seed=int(rng.integers(1 << 30)), batch_center=batch_center)
    t_reps = [T.Tensor(rng.random((b, c, 3, 3))) for c in t_dims]
    s_reps = [T.Tensor(rng.random((b, c, 3, 3))) for c in s_dims]
    t_pen = T.Tensor(rng.random((b, t_dims[-1])))
    s_pen = T.Tensor(rng.random((b, s_dims[-1])))
    bank = MemoryBank(3, n_d, d, seed=int(rng.integers(1 << 30)))
    idx = rng.choice(n_d, size=b, replace=False)
    neg_seed = int(rng.integers(1 << 30))

    got = [v.item() for v in l_mckt(t_reps, s_reps, heads, bank, params, idx, np.random.default_rng(neg_seed))]
    got.append(l_pckt(t_pen, s_pen, heads, bank, params, idx, np.random.default_rng(neg_seed + 1)).item())
    bank.discard_pending()

    # replay the negative draws, then sum by hand
    worst = 0.0
    draws = np.random.default_rng(neg_seed)
    sites = [(pool_and_flatten(t).data, pool_and_flatten(s).data, pair)
             for t, s, pair in zip(t_reps, s_reps, heads.modules)]
    sites.append((t_pen.data, s_pen.data, heads.penultimate))
    for site, (tf, sf, pair) in enumerate(sites):
        if site == len(heads.modules):
            draws = np.random.default_rng(neg_seed + 1)
        neg_idx = bank.sample_indices(idx, n, draws)
        negs = bank.slots[(site, "teacher")][neg_idx]
        u = _hand_project(pair.student, sf)
        v = _hand_project(pair.teacher, tf)
        want = brute_site_loss(u, v, negs, tau, n, n_d)
        worst = max(worst, abs(got[site] - want) / max(1.0, abs(want)))
    return worst


def oracle_suite(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    # alternate plain affine heads and batch-centred heads
    worst = max(_oracle_instance(rng, batch_center=bool(i % 2)) for i in range(instances))
    results = [CheckResult(f"oracle site losses vs direct summation ({instances} instances)", worst, ORACLE_TOL)]
    return results + analytic_anchors()


def analytic_anchors() -> list[CheckResult]:
    out = []
    for n, n_d in ((1, 10), (8, 100), (64, 400)):
        p = CriticParams(0.1, n, n_d)
        u = np.zeros((3, 4))
        u[:, 0] = 1.0
        negs = np.broadcast_to(u[:, None, :], (3, n, 4)).copy()
        loss = nce_loss(T.Tensor(u), T.Tensor(u), negs, p).item()
        out.append(CheckResult(f"uniform scores give log(N+1), N={n}", abs(loss - math.log(n + 1)), ANCHOR_TOL))
    e1, e2 = np.eye(4)[0], np.eye(4)[1]
    out.append(CheckResult("critic at zero similarity with N = N_d is 1/2",
                           abs(critic_f(e1, e2, CriticParams(0.3, 50, 50)) - 0.5), ANCHOR_TOL))
    x = rng_fixed(7, 5, 6)
    out.append(CheckResult("kd_kl(x, x) = 0", abs(kd_kl(x, T.Tensor(x), 4.0).item()), ANCHOR_TOL))
    for c in (2, 10, 100):
        ce = cross_entropy(np.arange(4) % c, T.Tensor(np.zeros((4, c)))).item()
        out.append(CheckResult(f"uniform logits give CE = log c, c={c}", abs(ce - math.log(c)), ANCHOR_TOL))
    return out
