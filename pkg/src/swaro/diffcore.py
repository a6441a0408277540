"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever at least
one input requires a gradient.  :func:`backward` then walks the tape in
reverse, visiting every node once.

Broadcasting is deliberately limited to scalar-with-tensor.  Anything else
(adding a bias row to a matrix, say) goes through :func:`expand`, which
makes the broadcast explicit and differentiable.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12

_ids = itertools.count()
_active: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values are outside the domain of the requested operation."""


class Tensor:
    """Immutable dense array plus the bookkeeping needed for autodiff."""

    __slots__ = ("data", "requires_grad", "id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all semantics live in the functions below
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(arr: np.ndarray, requires_grad: bool = False) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.flags.writeable and arr.base is not None:
        arr = arr.copy()
    arr.setflags(write=False)
    t.data = arr
    t.requires_grad = requires_grad
    t.id = next(_ids)
    return t


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Single-writer record of differentiable operations.

    Use as a context manager; while active, every op whose inputs require
    gradients appends a node ``(output, inputs, vjp)``.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._open = False

    def __enter__(self) -> "Tape":
        if self._open:
            raise RuntimeError("tape is already recording")
        self._open = True
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        self._open = False
        return False

    def __len__(self):
        return len(self.nodes)


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    res = _wrap(out, requires_grad=needs and bool(_active))
    if res.requires_grad:
        _active[-1].nodes.append((res, inputs, vjp))
    return res


def backward(tape: Tape, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that do not influence ``output`` receive zeros.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.data)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    result = []
    for t in wrt:
        g = grads.get(t.id)
        result.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64))
    return result


def value_and_grad(fn: Callable[..., Tensor], *args) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves built from ``args`` and differentiate."""
    leaves = [Tensor(a, requires_grad=True) for a in args]
    with Tape() as tape:
        out = fn(*leaves)
    return out.item(), backward(tape, out, leaves)


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for coordinate ``i`` is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    value, (analytic,) = value_and_grad(fn, x)
    if not np.isfinite(value):
        raise DomainError(f"function value is not finite at the base point: {value}")
    flat = x.reshape(-1)
    an = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        hi = fn(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] -= 2 * step
        lo = fn(Tensor(bumped.reshape(x.shape))).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise DomainError(f"non-finite value while perturbing coordinate {i}")
        numeric = (hi - lo) / (2 * step)
        worst = max(worst, abs(an[i] - numeric) / max(1.0, abs(an[i])))
    return worst


# ---------------------------------------------------------------- helpers


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.ndim <= 1


def _binary_operands(name: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


# ------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scalar times tensor."""
    a, b = _binary_operands("mul", a, b)
    out = a.data * b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)))


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a),
                              _unbroadcast(-g * out / b.data, b)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record(a.data.T, (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def identity(a: Tensor) -> Tensor:
    return a


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def absolute(a: Tensor) -> Tensor:
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _record(np.clip(a.data, lo_, hi_), (a,), lambda g: (g * inside,))


def _expand_axis(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, ()), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record(out, (a,), lambda g: (_expand_axis(g, a.shape, axis, keepdims).copy(),))


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty reduction")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum with the gradient routed to the first maximising entry."""
    if axis is None:
        flat_idx = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat_idx]
        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)

        def vjp(g):
            full = np.zeros(a.size)
            full[flat_idx] = np.reshape(g, ())
            return (full.reshape(a.shape),)

        return _record(np.asarray(out), (a,), vjp)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def vjp(g):
        full = np.zeros(a.shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis)
        return (full,)

    return _record(out, (a,), vjp)


def l2norm(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Stabilised Euclidean norm ``sqrt(sum(a**2) + NORM_EPS)``."""
    ss = a.data * a.data
    out = np.sqrt(ss.sum(axis=axis, keepdims=keepdims) + NORM_EPS)

    def vjp(g):
        return (_expand_axis(g / out, a.shape, axis, keepdims) * a.data,)

    return _record(out, (a,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_rows: incompatible shapes {[p.shape for p in parts]}")
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=0)))


def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast of size-1 axes (or a row vector) up to ``shape``."""
    src = a.shape
    if len(src) < len(shape):
        src = (1,) * (len(shape) - len(src)) + src
    if len(src) != len(shape) or any(s != 1 and s != t for s, t in zip(src, shape)):
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}")
    out = np.broadcast_to(a.data.reshape(src), shape).copy()
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True).reshape(a.shape),)

    return _record(out, (a,), vjp)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), vjp)


def pick(a: Tensor, cols) -> Tensor:
    """``out[r] = a[r, cols[r]]`` for a matrix ``a``."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"pick: need a matrix and one column per row, got {a.shape}, {cols.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros(a.shape)
        full[rows, cols] = g
        return (full,)

    return _record(a.data[rows, cols], (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``.

    ``mask`` (same shape as ``a``, boolean) selects the entries that take
    part; every reduced slice must keep at least one entry.
    """
    x = a.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            raise ShapeError(f"logsumexp: mask shape {keep.shape} != input shape {x.shape}")
    if np.any(~keep.any(axis=axis)):
        raise DomainError("logsumexp: a reduced slice has no entries")
    masked = np.where(keep, x, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    w = np.where(keep, np.exp(masked - m), 0.0)
    s = w.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * w / s,)

    return _record(out, (a,), vjp)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """``a + v`` where ``v`` is a row vector matching ``a``'s width."""
    return add(a, expand(v, a.shape))


def normalize_rows(a: Tensor) -> Tensor:
    """Rows scaled to unit (stabilised) Euclidean norm."""
    norms = l2norm(a, axis=1, keepdims=True)
    return div(a, expand(norms, a.shape))


def stack_grads(grads: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])
