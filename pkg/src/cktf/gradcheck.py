"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor``.

    ``tensor.data`` is perturbed in place and restored afterwards.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = fn().item()
        flat[k] = orig - step
        fm = fn().item()
        flat[k] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out.reshape(tensor.shape)


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the backward gradient of ``fn`` at ``point``
    and its central-difference estimate.

    ``fn`` maps a tensor to a scalar tensor.
    """
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    loss = fn(x)
    loss.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    numeric = numeric_grad(lambda: fn(x), x, step)
    return max_relative_error(analytic, numeric)


def check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                 step: float = 1e-5) -> dict[str, float]:
    """Gradient-check ``loss_fn`` against each tensor in ``params``.

    Returns a per-tensor max relative error keyed by tensor name (or position).
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    report = {}
    for i, p in enumerate(params):
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = numeric_grad(loss_fn, p, step)
        report[p.name or f"param{i}"] = max_relative_error(analytic, numeric)
    return report
