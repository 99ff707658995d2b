"""Dense reverse-mode automatic differentiation on top of numpy.

A :class:`Tensor` wraps a float64 array.  Every operation that involves a
tensor requiring gradients records a closure on the resulting tensor; calling
:meth:`Tensor.backward` walks the recorded graph once in reverse topological
order and accumulates gradients into every leaf.

Only what the GRBE model needs is provided, plus two graph-specific
primitives (:func:`spmm` and :func:`propagate`) that keep message passing
sparse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operands of a primitive have incompatible shapes."""


class NumericDivergence(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.broadcast_to(np.asarray(grad, dtype=DTYPE), self.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._prev = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)

    return _result(a.data.T, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def _sigmoid_grad(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _stable_sigmoid(a.data)

    def backward(g):
        # looked up at call time so tests can inject a faulty derivative
        a._accumulate(g * _sigmoid_grad(y))

    return _result(y, (a,), backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def backward(g):
        a._accumulate(g * keep)

    return _result(np.where(keep, a.data, 0.0), (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericDivergence("log of a non-positive value")

    def backward(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        a._accumulate(g * y)

    return _result(y, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / y)

    return _result(y, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)

    def backward(g):
        a._accumulate(g * s)

    return _result(np.abs(a.data), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside ``[lo, hi]``."""
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accumulate(g * inside)

    return _result(np.clip(a.data, lo, hi), (a,), backward)


def total(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum reduction (named to avoid shadowing the builtin)."""

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return mul(total(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = shifted / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(g * soft)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _result(data, tensors, backward)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Select entries (1-D) or rows (2-D) by integer index; repeats allowed."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        if a.ndim == 1:
            a._accumulate(np.bincount(index, weights=g, minlength=a.shape[0]))
        else:
            acc = np.zeros_like(a.data)
            np.add.at(acc, index, g)
            a._accumulate(acc)

    return _result(a.data[index], (a,), backward)


def spmm(matrix: sp.spmatrix, a: Tensor) -> Tensor:
    """Multiply a constant sparse matrix with a dense tensor."""
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"spmm: {matrix.shape} @ {a.shape}")
    matrix = sp.csr_matrix(matrix)

    def backward(g):
        a._accumulate(matrix.T @ g)

    return _result(matrix @ a.data, (a,), backward)


def propagate(h: Tensor, src: np.ndarray, dst: np.ndarray, weight: Tensor, n: int) -> Tensor:
    """Weighted neighbour sum: ``out[v] = sum_{e: dst[e]=v} weight[e] * h[src[e]]``.

    ``weight`` holds one entry per directed edge and may require gradients.
    """
    weight = as_tensor(weight)
    if weight.shape != (len(src),) or len(src) != len(dst):
        raise ShapeError(f"propagate: {len(src)} edges but weight shape {weight.shape}")
    if h.shape[0] != n:
        raise ShapeError(f"propagate: features for {h.shape[0]} nodes, graph has {n}")
    adj = sp.csr_matrix((weight.data, (dst, src)), shape=(n, n))

    def backward(g):
        if h.requires_grad:
            h._accumulate(adj.T @ g)
        if weight.requires_grad:
            weight._accumulate(np.einsum("ij,ij->i", g[dst], h.data[src]))

    return _result(adj @ h.data, (h, weight), backward)


class Adam:
    """Adam with bias correction over a name -> Tensor parameter store."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericDivergence(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = 20,
    rng: np.random.Generator | None = None,
    per_group: bool = False,
):
    """Compare analytic gradients with central differences.

    ``loss_fn`` re-evaluates the scalar loss from the current parameter data;
    any randomness inside it must be re-seeded per call so noise stays frozen.
    Up to ``max_coords`` coordinates are sampled per parameter (``None`` checks
    all of them).  Returns the max relative error, or ``(max_error, errors by
    parameter name)`` when ``per_group`` is set.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericDivergence(f"loss is not finite: {loss.data}")
    for p in params.values():
        p.grad = None
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords: Iterable[int]
        if max_coords is None or flat.size <= max_coords:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericDivergence(f"loss not finite while perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    overall = max(errors.values()) if errors else 0.0
    return (overall, errors) if per_group else overall
