"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op builds a node holding its parents and a closure mapping the
upstream gradient to one gradient per parent. ``backward`` walks the graph
once in reverse topological order and accumulates into ``.grad`` of every
tensor that requires a gradient. Gradients accumulate across calls until
``zero_grad`` is used.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, ParameterError, ShapeError, UsageError

L2_EPS = 1e-12

_GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: _GradFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    # autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: _GradFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    if grad is None:
        if loss.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    upstream: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# reductions and shape ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def index_rows(a: Tensor, index) -> Tensor:
    """Gather ``a[index]`` along axis 0; ``index`` may be any integer array."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), grad_fn)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    s = np.exp(ad - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = np.exp(ad - out_k)
    return _make(np.squeeze(out_k, axis=axis), (a,),
                 lambda g: (np.expand_dims(g, axis) * soft,))


# linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise ``x @ weight + bias`` for ``x`` of shape [B, n], weight [n, k]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"affine expects rank-2 input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine inner mismatch: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]}")
        out = add(out, bias)
    return out


# convolution ------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B, C_in, H, W] with [C_out, C_in, kH, kW]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError("stride must be >= 1 and padding >= 0")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ShapeError(f"input has {C} channels but weight expects {Ci}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f"padded input {Hp}x{Wp} smaller than kernel {kh}x{kw}")
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    # [B, C, oh, ow, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * oh * ow, C * kh * kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, oh, ow, O).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeError(f"bias shape {bias.shape} does not match {O} output channels")
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * oh * ow, O)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(B, oh, ow, C, kh, kw)
        gxp = np.zeros((B, C, Hp, Wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C, 1, 1] spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank 4, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


# normalizations ----------------------------------------------------------

def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects rank 2, got {x.shape}")
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def grad_fn(g):
        return ((g - soft * g.sum(axis=1, keepdims=True)) / temperature,)

    return _make(out, (x,), grad_fn)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    return exp(log_softmax(x, temperature))


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize expects rank 2, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms < eps):
        bad = np.flatnonzero(norms[:, 0] < eps).tolist()
        raise DegenerateInputError(f"rows {bad} have norm below {eps}")
    y = x.data / norms

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _make(y, (x,), grad_fn)
