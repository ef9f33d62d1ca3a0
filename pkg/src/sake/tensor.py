"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a local gradient rule on the output tensor.
``backward`` orders the recorded graph topologically (the tape), walks it in
reverse once, and releases it.
"""

from __future__ import annotations

import contextlib
import threading
import time
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything for backward."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- op timing (used by the benchmark for per-stage accounting) -------------

_profile: dict[str, float] | None = None


@contextlib.contextmanager
def profile_ops():
    """Accumulate forward wall time per op name while active."""
    global _profile
    prev = _profile
    _profile = defaultdict(float)
    try:
        yield _profile
    finally:
        _profile = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- binary elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(-g, sb) if rb else None),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if ra else None,
            _unbroadcast(g * ad, bd.shape) if rb else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (
                _unbroadcast(g / bd, ad.shape) if ra else None,
                _unbroadcast(-g * out / bd, bd.shape) if rb else None,
            )

    return _make(out, (a, b), bw, "div")


# --- unary elementwise -------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(t: Tensor) -> Tensor:
    s = _sigmoid(t.data)
    return _make(s, (t,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(t: Tensor) -> Tensor:
    x = t.data
    s = _sigmoid(x)
    return _make(x * s, (t,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def celu(t: Tensor) -> Tensor:
    """CELU with alpha = 1."""
    x = t.data
    neg = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    return _make(out, (t,), lambda g: (g * np.where(x > 0, 1.0, neg + 1.0),), "celu")


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return _make(y, (t,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(t: Tensor) -> Tensor:
    y = np.exp(t.data)
    return _make(y, (t,), lambda g: (g * y,), "exp")


def log(t: Tensor) -> Tensor:
    x = t.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / x,)

    return _make(y, (t,), bw, "log")


def square(t: Tensor) -> Tensor:
    x = t.data
    return _make(x * x, (t,), lambda g: (2.0 * g * x,), "square")


def sqrt(t: Tensor) -> Tensor:
    x = t.data
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x)

    def bw(g):
        # subgradient 0 at exactly 0
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / y, 0.0)
        return (g * d,)

    return _make(y, (t,), bw, "sqrt")


def cos(t: Tensor) -> Tensor:
    x = t.data
    return _make(np.cos(x), (t,), lambda g: (-g * np.sin(x),), "cos")


_UNARY = {
    "silu": silu,
    "celu": celu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "cos": cos,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *args) -> Tensor:
    if kind in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{kind} takes 2 arguments, got {len(args)}")
        return _BINARY[kind](*args)
    if kind in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{kind} takes 1 argument, got {len(args)}")
        return _UNARY[kind](as_tensor(args[0]))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --- linear algebra, reductions, shape ops ----------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _make(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if ra else None, ad.T @ g if rb else None),
        "matmul",
    )


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce_sum(t: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = t.shape
    axis = _norm_axis(axis, t.ndim)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(t.data.sum(axis=axis, keepdims=keepdims), (t,), bw, "sum")


def reduce_mean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = t.shape
    axis = _norm_axis(axis, t.ndim)
    count = t.data.size if axis is None else shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make(t.data.mean(axis=axis, keepdims=keepdims), (t,), bw, "mean")


def reduce_max(t: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max with gradient routed to the first maximal element."""
    x = t.data
    axis = _norm_axis(axis, t.ndim)
    if (x.size if axis is None else x.shape[axis]) == 0:
        raise ShapeError("max over an empty axis")
    if axis is None:
        flat = int(np.argmax(x))
        out = x.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)

        def bw(g):
            d = np.zeros(x.size)
            d[flat] = np.sum(g)
            return (d.reshape(x.shape),)

    else:
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, idx, axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def bw(g):
            d = np.zeros_like(x)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(d, idx, gk, axis)
            return (d,)

    return _make(np.asarray(out, dtype=np.float64), (t,), bw, "max")


def reduce(kind: str, t: Tensor, axis=None, keepdims=False) -> Tensor:
    fn = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}.get(kind)
    if fn is None:
        raise ValueError(f"unknown reduction {kind!r}")
    return fn(t, axis, keepdims)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat of an empty list")
    if len(ts) == 1:
        return ts[0]
    ranks = {t.ndim for t in ts}
    if len(ranks) != 1:
        raise ShapeError(f"concat: rank mismatch among shapes {[t.shape for t in ts]}")
    axis = _norm_axis(axis, ts[0].ndim)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def reshape(t: Tensor, shape) -> Tensor:
    old = t.shape
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),), "reshape")


def transpose(t: Tensor) -> Tensor:
    return _make(t.data.T, (t,), lambda g: (g.T,), "transpose")


def take_rows(t: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``t[index]``; the backward scatters back with a sparse product."""
    index = np.asarray(index, dtype=np.intp)
    n = t.shape[0]

    def bw(g):
        s = sp.csr_matrix(
            (np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index))
        )
        width = int(np.prod(g.shape[1:]))
        return ((s @ g.reshape(len(index), width)).reshape((n,) + g.shape[1:]),)

    return _make(t.data[index], (t,), bw, "take_rows")


def segment_matrix(segment_ids: np.ndarray, num_segments: int) -> sp.csr_matrix:
    ids = np.asarray(segment_ids, dtype=np.intp)
    return sp.csr_matrix(
        (np.ones(len(ids)), (ids, np.arange(len(ids)))), shape=(num_segments, len(ids))
    )


def segment_sum(t: Tensor, segment_ids: np.ndarray, num_segments: int, matrix=None) -> Tensor:
    """Sum rows of ``t`` into ``num_segments`` buckets; empty buckets are 0."""
    s = segment_matrix(segment_ids, num_segments) if matrix is None else matrix
    rows = t.shape[0]
    tail = t.shape[1:]
    width = int(np.prod(tail))  # explicit, so empty edge lists reshape cleanly
    out = (s @ t.data.reshape(rows, width)).reshape((num_segments,) + tail)
    return _make(
        out,
        (t,),
        lambda g: ((s.T @ g.reshape(num_segments, width)).reshape((rows,) + tail),),
        "segment_sum",
    )


def constant_like(t: Tensor, value: float) -> Tensor:
    return Tensor(np.full(t.shape, value))


# --- backward ----------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root`` in topological order."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise RuntimeError("graph already consumed by a previous backward")
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg
    for node in tape:
        if not node.is_leaf:
            node._backward = None


def check_finite(t, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what} has {bad} non-finite entries")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@contextlib.contextmanager
def timed(name: str):
    """Attribute wall time of the enclosed block to ``name`` when profiling."""
    if _profile is None:
        yield
        return
    t0 = time.perf_counter()
    try:
        yield
    finally:
        _profile[name] += time.perf_counter() - t0
