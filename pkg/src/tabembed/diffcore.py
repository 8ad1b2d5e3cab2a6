"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients.  Ops are
also appended to the innermost active :class:`Tape`, if any, so a caller
can replay them in recorded (topological) order.  Without a tape,
:func:`backward` recovers the order by walking the graph from the loss.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

BCE_EPS = 1e-7

_tape_stack: list["Tape"] = []
_grad_enabled = True


class Tensor:
    """A dense n-d array of float64 values that may take part in a tape."""

    __slots__ = ("data", "grad", "tracked", "version", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, tracked: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tracked = tracked
        # bumped on every in-place update; drives cache staleness checks
        self.version = 0
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, tracked={self.tracked}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, values) -> None:
        """Overwrite values in place and bump the version stamp."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise DimensionError(f"assign: shape {values.shape} != {self.data.shape}")
        self.data[...] = values
        self.version += 1

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the ops built while the tape is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without linking them into a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.version = 0
    out.name = None
    out.tracked = _grad_enabled and any(p.tracked for p in parents)
    if out.tracked:
        out._parents = parents
        out._backward = backward_fn
        if _tape_stack:
            _tape_stack[-1].nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n),)

    return _make(np.asarray(x.data.mean()), (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from exc

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw)


def gather_rows(table: Tensor, index) -> Tensor:
    """Rows of a 2-d ``table`` selected by an integer index array."""
    index = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-d, got {table.shape}")
    rows = table.shape[0]

    def bw(g):
        flat_idx = index.reshape(-1)
        flat_g = g.reshape(len(flat_idx), -1)
        out = np.zeros(table.shape)
        # bincount per column is much faster than np.add.at for wide batches
        for j in range(table.shape[1]):
            out[:, j] = np.bincount(flat_idx, weights=flat_g[:, j], minlength=rows)
        return (out,)

    return _make(table.data[index], (table,), bw)


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of a ``(m, k)`` (or ``(k,)``) and a ``(k, n)`` tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.data.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def affine(x, W, b) -> Tensor:
    """``W x + b`` for ``x`` of shape ``(d_in,)`` or a batch ``(n, d_in)``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not agree"
        )
    xd, Wd = x.data, W.data

    def bw(g):
        if xd.ndim == 1:
            gW = np.outer(g, xd)
            gb = g
        else:
            gW = g.T @ xd
            gb = g.sum(axis=0)
        return g @ Wd, gW, gb

    return _make(xd @ Wd.T + b.data, (x, W, b), bw)


# --- nonlinearities ---------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(np.atleast_1d(x.data)).reshape(x.shape)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def exu(x, w, b, cap: float = 1.0) -> Tensor:
    """Exp-centered unit ``min(max((x - b) * exp(w), 0), cap)``.

    ``w`` and ``b`` broadcast against ``x`` (per-unit parameters over a
    batch).  The gradient vanishes outside the open band ``(0, cap)``.
    """
    if not cap > 0:
        raise ParameterError(f"exu: cap must be positive, got {cap}")
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _broadcast_shape(x, w, "exu")
    _broadcast_shape(x, b, "exu")
    scale = np.exp(w.data)
    centered = x.data - b.data
    pre = centered * scale
    active = (pre > 0) & (pre < cap)

    def bw(g):
        ga = np.where(active, g, 0.0)
        gx = ga * scale
        return (
            _unbroadcast(gx, x.shape),
            _unbroadcast(ga * pre, w.shape),
            _unbroadcast(-gx, b.shape),
        )

    return _make(np.clip(pre, 0.0, cap), (x, w, b), bw)


def bce_loss(p, y, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``.

    ``p`` is clamped to ``[eps, 1 - eps]``; the gradient is that of the
    clamped function, so it is zero where clamping is active.
    """
    p, y = as_tensor(p), as_tensor(y)
    if p.shape != y.shape:
        raise DimensionError(f"bce_loss: p {p.shape} vs y {y.shape}")
    n = max(p.size, 1)
    pc = np.clip(p.data, eps, 1.0 - eps)
    yd = y.data
    loss = -np.mean(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc))
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def bw(g):
        dp = -(yd / pc - (1.0 - yd) / (1.0 - pc)) / n
        dy = -(np.log(pc) - np.log1p(-pc)) / n
        return g * np.where(inside, dp, 0.0), g * dy

    return _make(np.asarray(loss), (p, y), bw)


# --- reverse pass -----------------------------------------------------------

def _topological(loss: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every tracked tensor.

    With ``tape``, the recorded nodes are replayed in reverse; otherwise the
    graph is walked from ``loss``.  Untracked tensors are never touched.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.tracked:
        raise ContractError("backward: loss does not depend on any tracked tensor")
    if tape is not None:
        if loss._backward is not None and not any(n is loss for n in tape.nodes):
            raise ContractError("backward: loss was not produced on the given tape")
        nodes = tape.nodes
    else:
        nodes = _topological(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                touched[key] = parent
    for key, t in touched.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
