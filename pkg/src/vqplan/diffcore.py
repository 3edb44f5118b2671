"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that require
gradients while the tape is active.  ``backward`` replays the record in
reverse, visiting each node once, and returns the gradient of a scalar root
with respect to every watched leaf.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)[x]
    array(6.)
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ContractError", "SolverError", "backward", "tensor",
    "as_tensor", "checked_mode", "checked_enabled", "add", "sub", "mul", "div", "neg", "power",
    "matmul", "sum", "mean", "reshape", "transpose", "swapaxes", "getitem",
    "concat", "stack", "exp", "log", "tanh", "sigmoid", "relu", "maximum",
    "minimum", "clip", "sqrt", "square", "sin", "cos", "arctan2", "abs",
    "where", "softmax", "log_softmax", "logsumexp", "stop_gradient",
    "st_passthrough", "solve_linear", "broadcast_to", "expand_dims",
    "finite_difference_grad", "CONDITION_CAP",
]

CONDITION_CAP = 1e12


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


class SolverError(RuntimeError):
    def __init__(self, msg: str, condition: float):
        super().__init__(f"{msg} (condition estimate {condition:.3e})")
        self.condition = condition


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.checked = False
    return _state.tapes


def _checked() -> bool:
    _tape_stack()
    return _state.checked


def checked_enabled() -> bool:
    """True inside :func:`checked_mode`."""
    return _checked()


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Reject non-finite values at tensor creation inside the block.

    Solvers also assert their optimality residuals while it is on.
    """
    _tape_stack()
    prev = _state.checked
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if _checked() and not np.all(np.isfinite(arr)):
            raise ContractError(f"non-finite value in tensor {name or ''}".strip())
        self.value = arr
        self.requires_grad = requires_grad
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    def __len__(self) -> int:
        return len(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tensors requiring gradients are
    recorded while the tape is the innermost active one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.watched: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            if not any(t is w for w in self.watched):
                self.watched.append(t)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def _record(self, out: Tensor, parents: tuple, vjp: Callable) -> None:
        node = _Node(out, parents, vjp)
        out._node = node
        out.requires_grad = True
        self.nodes.append(node)

    def backward(self, root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
        return backward(self, root, leaves)


def backward(tape: Tape, root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    """Gradient of scalar ``root`` with respect to each leaf.

    Leaves default to the tape's watched tensors.  Leaves that do not
    participate in the computation map to zero arrays.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    leaves = list(tape.watched if leaves is None else leaves)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out


def _make(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    stack = _tape_stack()
    if stack and any(p.requires_grad for p in parents):
        stack[-1]._record(out, tuple(parents), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            ga = np.matmul(bv, g[..., None])[..., 0] if bv.ndim > 2 else bv @ g
            gb = np.multiply.outer(av, g) if bv.ndim == 2 else av[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bv.ndim == 1:
            ga = g[..., :, None] * bv
            gb = np.matmul(np.swapaxes(av, -1, -2), g[..., None])[..., 0]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(av, bv), (a, b), vjp)


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise ContractError("index with arrays, not tensors")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    k = len(ts)
    return _make(np.stack([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(k)))


# ---------------------------------------------------------------- elementwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send zero gradient to both sides."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(np.maximum(av, bv), (a, b),
                 lambda g: (_unbroadcast(g * (av > bv), a.shape), _unbroadcast(g * (bv > av), b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(np.minimum(av, bv), (a, b),
                 lambda g: (_unbroadcast(g * (av < bv), a.shape), _unbroadcast(g * (bv < av), b.shape)))


def clip(a, lo, hi) -> Tensor:
    """Clip to ``[lo, hi]``; bounds may be tensors.  Zero gradient at the kinks."""
    a, lo, hi = as_tensor(a), as_tensor(lo), as_tensor(hi)
    av, lv, hv = a.value, lo.value, hi.value
    out = np.minimum(np.maximum(av, lv), hv)
    inside = (av > lv) & (av < hv)
    below = (lv > av) & (lv < hv)
    above = hv < np.maximum(av, lv)
    return _make(out, (a, lo, hi), lambda g: (
        _unbroadcast(g * inside, a.shape),
        _unbroadcast(g * below, lo.shape),
        _unbroadcast(g * above, hi.shape),
    ))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (np.where(out > 0, g * 0.5 / np.where(out > 0, out, 1.0), 0.0),))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def arctan2(y, x, eps: float = 1e-9) -> Tensor:
    """Polar angle; points with radius below ``eps`` get zero gradient."""
    y, x = as_tensor(y), as_tensor(x)
    yv, xv = y.value, x.value
    r2 = xv * xv + yv * yv
    safe = r2 >= eps * eps
    inv = np.where(safe, 1.0 / np.where(safe, r2, 1.0), 0.0)
    return _make(np.arctan2(yv, xv), (y, x),
                 lambda g: (_unbroadcast(g * xv * inv, y.shape), _unbroadcast(-g * yv * inv, x.shape)))


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    return _make(np.where(c, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(c, g, 0.0), a.shape), _unbroadcast(np.where(c, 0.0, g), b.shape)))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    s = np.exp(av - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m)
    soft = s / tot

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return a - logsumexp(a, axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    av = a.value
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).value)


def st_passthrough(z_q, z_e) -> Tensor:
    """Straight-through estimator: value of ``z_q``, gradient routed to ``z_e``."""
    z_q, z_e = as_tensor(z_q), as_tensor(z_e)
    if z_q.shape != z_e.shape:
        raise ContractError(f"st_passthrough shape mismatch {z_q.shape} vs {z_e.shape}")
    return _make(z_q.value.copy(), (z_e,), lambda g: (g,))


# ---------------------------------------------------------------- linear algebra

def solve_linear(A, b, cond_cap: float = CONDITION_CAP, check: bool = True) -> Tensor:
    """Solve ``A x = b`` for square (optionally batched) ``A``.

    ``b`` may be a vector per system (shape ``A.shape[:-1]``) or a matrix of
    right-hand sides.  One step of iterative refinement is applied.  The
    gradient follows ``A dx = db - dA x``.
    """
    A, b = as_tensor(A), as_tensor(b)
    Av, bv = A.value, b.value
    if Av.ndim < 2 or Av.shape[-1] != Av.shape[-2]:
        raise ContractError(f"solve_linear needs square A, got {Av.shape}")
    vec = bv.ndim == Av.ndim - 1
    B = bv[..., None] if vec else bv
    if B.shape[-2] != Av.shape[-1]:
        raise ContractError(f"solve_linear shape mismatch {Av.shape} vs {bv.shape}")
    if check:
        cond = np.max(np.linalg.cond(Av))
        if not np.isfinite(cond) or cond > cond_cap:
            raise SolverError("singular or ill-conditioned system", float(cond))
    try:
        X = np.linalg.solve(Av, B)
        X = X + np.linalg.solve(Av, B - Av @ X)
    except np.linalg.LinAlgError as err:
        raise SolverError(str(err), float("inf")) from err
    out = X[..., 0] if vec else X

    def vjp(g):
        G = g[..., None] if vec else g
        gB = np.linalg.solve(np.swapaxes(Av, -1, -2), G)
        gA = -np.matmul(gB, np.swapaxes(X, -1, -2))
        gb = gB[..., 0] if vec else gB
        return _unbroadcast(gA, A.shape), _unbroadcast(gb, b.shape)

    return _make(out, (A, b), vjp)


# ---------------------------------------------------------------- oracles

def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
