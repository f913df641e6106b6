"""Reverse-mode differentiation over float64 arrays.

Values produced by operations remember their operands and a pullback. The
pullbacks are themselves written with these operations, so a gradient can be
requested as a live value (``gradient_as_value``) and differentiated once more.
That single extra level is what a gradient penalty needs and is the only
nesting supported.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NestingUnsupported, NonFiniteError, ShapeError

_ids = itertools.count()
_reduce_add = np.add.reduce
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def _set_record(flag: bool):
    prev = _recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = prev


def no_record():
    """Evaluate without recording operands (inference, optimizer bookkeeping)."""
    return _set_record(False)


class DiffValue:
    __slots__ = ("data", "parents", "pullback", "requires_grad", "order", "id", "ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("non-finite entries in new value")
        self.parents: tuple[DiffValue, ...] = ()
        self.pullback = None
        self.requires_grad = requires_grad
        self.order = 0
        self.id = next(_ids)
        self.ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> DiffValue:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DiffValue({self.data!r}{flag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return slice_(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def variable(data) -> DiffValue:
    """A leaf whose gradient can be requested."""
    return DiffValue(data, requires_grad=True)


def constant(data) -> DiffValue:
    return DiffValue(data, requires_grad=False)


def lift(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _make(data: np.ndarray, parents: tuple[DiffValue, ...], pullback: Callable, ctx=None,
          check: bool = True) -> DiffValue:
    # ops that cannot turn finite inputs into inf/nan pass check=False;
    # the sum is non-finite iff some entry is (barring overflow of the sum itself)
    if check and not math.isfinite(_reduce_add(data, None)) and not np.isfinite(data).all():
        raise NonFiniteError(f"operation {pullback.__name__.lstrip('_')} produced non-finite values")
    out = DiffValue.__new__(DiffValue)
    out.data = data
    out.id = next(_ids)
    out.order = max(p.order for p in parents)
    out.ctx = ctx
    if _recording() and any(p.requires_grad for p in parents):
        out.parents = parents
        out.pullback = pullback
        out.requires_grad = True
    else:
        out.parents = ()
        out.pullback = None
        out.requires_grad = False
    return out


def _shape_error(op: str, *vals: DiffValue) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {[v.shape for v in vals]}")


# -- broadcasting helpers ----------------------------------------------------

def broadcast_to(a, shape) -> DiffValue:
    a = lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise _shape_error("broadcast_to", a) from None
    return _make(data, (a,), _broadcast_to, ctx=a.shape, check=False)


def _broadcast_to(out, g):
    return (sum_to(g, out.ctx),)


def sum_to(a, shape) -> DiffValue:
    """Sum ``a`` down to ``shape`` (the inverse of broadcasting)."""
    a = lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True).reshape(shape)
    return _make(data, (a,), _sum_to, ctx=a.shape)


def _sum_to(out, g):
    return (broadcast_to(g, out.ctx),)


def _check_broadcast(op: str, a: DiffValue, b: DiffValue) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a, b) from None


# -- elementwise binary ops --------------------------------------------------

def add(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), _add)


def _add(out, g):
    a, b = out.parents
    return sum_to(g, a.shape), sum_to(g, b.shape)


def sub(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), _sub)


def _sub(out, g):
    a, b = out.parents
    return sum_to(g, a.shape), neg(sum_to(g, b.shape))


def mul(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b), _mul)


def _mul(out, g):
    a, b = out.parents
    ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    _check_broadcast("div", a, b)
    if (b.data == 0).any():
        raise DomainError("division by zero")
    return _make(a.data / b.data, (a, b), _div)


def _div(out, g):
    a, b = out.parents
    ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(neg(mul(g, div(out, b))), b.shape) if b.requires_grad else None
    return ga, gb


def neg(a) -> DiffValue:
    a = lift(a)
    return _make(-a.data, (a,), _neg, check=False)


def _neg(out, g):
    return (neg(g),)


# -- linear algebra and shape ops --------------------------------------------

def matmul(a, b) -> DiffValue:
    """2-D @ 2-D, 2-D @ 1-D (matrix-vector), or a stack of 2-D products (3-D @ 3-D)."""
    a, b = lift(a), lift(b)
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise _shape_error("matmul", a, b)
        return _make(np.matmul(a.data, b.data), (a, b), _matmul)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    return _make(a.data @ b.data, (a, b), _matmul)


def _matmul(out, g):
    a, b = out.parents
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def affine(x, w, b) -> DiffValue:
    """``x @ w.T + b``: one recorded op per dense layer.

    Plain: x (n, in), w (out, in), b (out,). Stacked: x (k, n, in),
    w (k, out, in), b (k, out), i.e. ``k`` independent layers at once.
    """
    x, w, b = lift(x), lift(w), lift(b)
    stacked = x.ndim == 3
    ok = (x.ndim == w.ndim == b.ndim + 1 and x.shape[-1] == w.shape[-1] and b.shape == w.shape[:-1]
          and (not stacked or x.shape[0] == w.shape[0]))
    if not ok or x.ndim not in (2, 3):
        raise _shape_error("affine", x, w, b)
    if stacked:
        data = np.matmul(x.data, np.swapaxes(w.data, 1, 2)) + b.data[:, None, :]
    else:
        data = x.data @ w.data.T + b.data
    return _make(data, (x, w, b), _affine)


def _affine(out, g):
    x, w, b = out.parents
    gx = matmul(g, w) if x.requires_grad else None
    gw = matmul(transpose(g), x) if w.requires_grad else None
    gb = sum_(g, axis=-2) if b.requires_grad else None
    return gx, gw, gb


def transpose(a) -> DiffValue:
    """Swap the last two axes."""
    a = lift(a)
    if a.ndim not in (2, 3):
        raise _shape_error("transpose", a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), _transpose, check=False)


def _transpose(out, g):
    return (transpose(g),)


def reshape(a, shape) -> DiffValue:
    a = lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a) from None
    return _make(data, (a,), _reshape, check=False)


def _reshape(out, g):
    return (reshape(g, out.parents[0].shape),)


def slice_(a, idx) -> DiffValue:
    a = lift(a)
    try:
        data = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    return _make(np.array(data), (a,), _slice, ctx=idx, check=False)


def _slice(out, g):
    return (_scatter(g, out.ctx, out.parents[0].shape),)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def _scatter(g: DiffValue, idx, shape) -> DiffValue:
    data = np.zeros(shape)
    if _is_basic(idx):
        data[idx] = g.data  # basic indices never repeat an element
    else:
        np.add.at(data, idx, g.data)
    return _make(data, (g,), _scatter_back, ctx=idx)


def _scatter_back(out, g):
    return (slice_(g, out.ctx),)


def concat(values: Sequence[DiffValue], axis: int = -1) -> DiffValue:
    values = tuple(lift(v) for v in values)
    if not values:
        raise ShapeError("concat of nothing")
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise _shape_error("concat", *values) from None
    return _make(data, values, _concat, ctx=axis, check=False)


def _concat(out, g):
    axis = out.ctx % g.ndim
    grads = []
    start = 0
    for v in out.parents:
        stop = start + v.shape[axis]
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, stop)
        grads.append(slice_(g, tuple(idx)) if v.requires_grad else None)
        start = stop
    return tuple(grads)


# -- reductions --------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = lift(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    return _make(data, (a,), _sum, ctx=(axis, keepdims))


def _sum(out, g):
    a = out.parents[0]
    axis, keepdims = out.ctx
    if not keepdims:
        axes = range(a.ndim) if axis is None else [ax % a.ndim for ax in np.atleast_1d(axis)]
        g = reshape(g, [1 if i in axes else n for i, n in enumerate(a.shape)])
    return (broadcast_to(g, a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = lift(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# -- elementwise nonlinearities ----------------------------------------------

def relu(a) -> DiffValue:
    a = lift(a)
    return _make(np.maximum(a.data, 0.0), (a,), _relu, check=False)


def _relu(out, g):
    # subgradient 0 at the kink
    return (_mask(g, out.parents[0].data > 0),)


def _mask(g: DiffValue, keep: np.ndarray) -> DiffValue:
    """``g`` with entries outside ``keep`` zeroed; linear in ``g``."""
    return _make(np.where(keep, g.data, 0.0), (g,), _mask_back, ctx=keep, check=False)


def _mask_back(out, g):
    return (_mask(g, out.ctx),)


def tanh(a) -> DiffValue:
    a = lift(a)
    return _make(np.tanh(a.data), (a,), _tanh, check=False)


def _tanh(out, g):
    return (mul(g, sub(1.0, square(out))),)


def sigmoid(a) -> DiffValue:
    a = lift(a)
    e = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(data, (a,), _sigmoid, check=False)


def _sigmoid(out, g):
    return (mul(g, mul(out, sub(1.0, out))),)


def log(a) -> DiffValue:
    a = lift(a)
    if (a.data <= 0).any():
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), _log)


def _log(out, g):
    return (div(g, out.parents[0]),)


def exp(a) -> DiffValue:
    a = lift(a)
    with np.errstate(over="ignore"):  # overflow is reported by _make
        data = np.exp(a.data)
    return _make(data, (a,), _exp)


def _exp(out, g):
    return (mul(g, out),)


def square(a) -> DiffValue:
    a = lift(a)
    return _make(a.data * a.data, (a,), _square)


def _square(out, g):
    return (mul(g, mul(out.parents[0], 2.0)),)


def sqrt(a) -> DiffValue:
    a = lift(a)
    if (a.data < 0).any():
        raise DomainError("sqrt of negative value")
    return _make(np.sqrt(a.data), (a,), _sqrt)


def _sqrt(out, g):
    return (div(g, mul(out, 2.0)),)


def abs_(a) -> DiffValue:
    a = lift(a)
    return _make(np.abs(a.data), (a,), _abs, check=False)


def _abs(out, g):
    return (mul(g, constant(np.sign(out.parents[0].data))),)


def clamp(a, lo: float, hi: float) -> DiffValue:
    """Clip to [lo, hi]; the gradient passes only where the input was inside."""
    a = lift(a)
    return _make(np.clip(a.data, lo, hi), (a,), _clamp, ctx=(lo, hi), check=False)


def _clamp(out, g):
    lo, hi = out.ctx
    x = out.parents[0].data
    return (mul(g, constant(((x >= lo) & (x <= hi)).astype(np.float64))),)


def _safe_reciprocal(a: DiffValue) -> DiffValue:
    x = a.data
    nz = x != 0
    data = np.where(nz, 1.0 / np.where(nz, x, 1.0), 0.0)
    return _make(data, (a,), _safe_reciprocal_back)


def _safe_reciprocal_back(out, g):
    return (neg(mul(g, square(out))),)


def l2_norm(a, axis: int = -1) -> DiffValue:
    """Euclidean norm along ``axis``; the gradient at the zero vector is taken as 0."""
    a = lift(a)
    return _make(np.sqrt((a.data * a.data).sum(axis=axis)), (a,), _l2_norm, ctx=axis)


def _l2_norm(out, g):
    a = out.parents[0]
    scale = mul(g, _safe_reciprocal(out))
    return (mul(a, reshape(scale, np.expand_dims(out.data, out.ctx).shape)),)


def softmax(a, axis: int = -1) -> DiffValue:
    a = lift(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    return _make(e / e.sum(axis=axis, keepdims=True), (a,), _softmax, ctx=axis, check=False)


def _softmax(out, g):
    inner = sum_(mul(g, out), axis=out.ctx, keepdims=True)
    return (mul(out, sub(g, inner)),)


def stop_gradient(a) -> DiffValue:
    """Same value, no dependence on the operand."""
    return constant(lift(a).data)


# -- gradients ---------------------------------------------------------------

class Tape:
    """Operation records reachable from an output, in creation order.

    Creation order is a topological order: operands always exist before the
    values computed from them.
    """

    def __init__(self, records: list[DiffValue]):
        self.records = records

    @classmethod
    def of(cls, output: DiffValue) -> Tape:
        seen: dict[int, DiffValue] = {}
        stack = [output]
        while stack:
            v = stack.pop()
            if v.id in seen or not v.requires_grad:
                continue
            seen[v.id] = v
            stack.extend(v.parents)
        return cls(sorted(seen.values(), key=lambda v: v.id))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _backprop(output: DiffValue, wrt: Sequence[DiffValue], create_graph: bool) -> list[DiffValue | None]:
    if output.size != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return [None] * len(wrt)
    wanted = {v.id for v in wrt}
    found: dict[int, DiffValue] = {}
    tape = Tape.of(output)
    with _set_record(create_graph):
        grads: dict[int, DiffValue] = {output.id: constant(np.ones(output.shape))}
        for node in reversed(tape.records):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.id in wanted:
                found[node.id] = g
            if node.pullback is None:
                continue
            for p, pg in zip(node.parents, node.pullback(node, g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    return [found.get(v.id) for v in wrt]


def gradient(output: DiffValue, wrt: Sequence[DiffValue]) -> list[np.ndarray]:
    """d output / d each of ``wrt`` as plain arrays (zeros where there is no path)."""
    grads = _backprop(output, wrt, create_graph=False)
    return [np.zeros(v.shape) if g is None else np.array(g.data).reshape(v.shape)
            for v, g in zip(wrt, grads)]


def gradient_as_value(output: DiffValue, wrt: DiffValue) -> DiffValue:
    """d output / d wrt as a recorded value that can be differentiated once more."""
    if output.order >= 1:
        raise NestingUnsupported("only one level of nested differentiation is supported")
    (g,) = _backprop(output, [wrt], create_graph=True)
    if g is None:
        g = constant(np.zeros(wrt.shape))
    out = _make(g.data.reshape(wrt.shape), (g,), _identity)
    out.order = output.order + 1
    return out


def _identity(out, g):
    return (reshape(g, out.parents[0].shape),)
