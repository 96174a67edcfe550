"""A small reverse-mode automatic differentiation engine on top of numpy.

Tensors wrap a dense row-major ``numpy.ndarray``. Every differentiable
operation records its parents together with a closure mapping the upstream
gradient to one gradient per parent; :func:`backward` replays those closures in
reverse topological order.

Broadcasting is deliberately restricted: binary elementwise operations accept
either equal shapes or a scalar (size-1) operand. Anything else must go through
:func:`expand`, so every implicit sum in a backward pass is visible in the code.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, (np.ndarray, np.generic)) and dtype is None and data.dtype.kind == "f":
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# -- graph traversal ---------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a root (parents first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def tracked_elements(self) -> int:
        """Number of float elements held by non-leaf (activation) nodes."""
        return sum(n.size for n in self.nodes if not n.is_leaf)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from a scalar ``root``.

    Leaf gradients accumulate across calls (use :func:`zero_grad` to reset);
    intermediate nodes receive the gradient of this call only.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root is not attached to a graph")
    graph = Graph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def detach(x: Tensor) -> Tensor:
    out = Tensor(x.data)
    out.op = "detach"
    return out


# -- elementwise -------------------------------------------------------------


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _unbroadcast(g: np.ndarray, target: Tensor) -> np.ndarray:
    if g.shape == target.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(target.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def negate(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "negate")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "relu": relu,
    "negate": negate,
}


def elementwise(op_kind: str, *operands):
    """Dispatch an elementwise op by name, e.g. ``elementwise("relu", x)``."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*operands)


# -- reductions --------------------------------------------------------------


def _check_axis(x: Tensor, axis) -> None:
    if axis is not None and not (-x.data.ndim <= axis < x.data.ndim):
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")


def _regrow(g: np.ndarray, x: Tensor, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * x.data.ndim), x.shape)
    return np.broadcast_to(np.expand_dims(g, axis), x.shape)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    _check_axis(x, axis)
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)
    return _make(out, (x,), lambda g: (_regrow(g, x, axis).copy(),), "sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis), dtype=x.dtype)
    inv = x.dtype.type(1.0 / n)
    return _make(out, (x,), lambda g: (_regrow(g, x, axis) * inv,), "mean")


def reduce_max(x: Tensor, axis=None) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    _check_axis(x, axis)
    if axis is None:
        idx = int(np.argmax(x.data))
        out = np.asarray(x.data.reshape(-1)[idx], dtype=x.dtype)

        def bw(g):
            dx = np.zeros(x.size, dtype=x.dtype)
            dx[idx] = g
            return (dx.reshape(x.shape),)

        return _make(out, (x,), bw, "max")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, np.expand_dims(g, axis), axis=axis)
        return (dx,)

    return _make(out, (x,), bw, "max")


def reduce(op_kind: str, x: Tensor, axis=None) -> Tensor:
    fn = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}.get(op_kind)
    if fn is None:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return fn(x, axis)


# -- shape manipulation ------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot expand {x.shape} to {shape}") from None
    lead = len(shape) - x.data.ndim
    padded = (1,) * lead + x.shape
    axes = tuple(i for i, (s, t) in enumerate(zip(padded, shape)) if s == 1 and t != 1)

    def bw(g):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        return (r.reshape(padded)[(0,) * lead] if lead else r.reshape(x.shape),)

    return _make(out, (x,), bw, "expand")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V x e) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"token id out of range for table of {table.shape[0]} rows")

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _make(table.data[ids], (table,), bw, "embedding")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias broadcast over rows."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, expand(b, y.shape))
    return y


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _make(y, (x,), bw, "l2_normalize_rows")


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy_rows(logits: Tensor) -> Tensor:
    """Mean over rows of ``-log softmax(row)[row_index]`` (diagonal targets)."""
    if logits.data.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise DimensionError(f"softmax_cross_entropy_rows expects a square matrix, got {logits.shape}")
    n = logits.shape[0]
    logp = log_softmax_rows(logits.data)
    out = np.asarray(-np.trace(logp) / n, dtype=logits.dtype)

    def bw(g):
        d = np.exp(logp)
        d[np.diag_indices(n)] -= 1
        return (d * (g / n),)

    return _make(out, (logits,), bw, "softmax_ce")


# -- 3D convolution ----------------------------------------------------------


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    b, c, d, h, w = x.shape
    od, oh, ow = (_out_size(n, k, stride, pad) for n in (d, h, w))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k * k * k, od, oh, ow), dtype=x.dtype)
    i = 0
    for a in range(k):
        for bb in range(k):
            for cc in range(k):
                cols[:, :, i] = xp[
                    :, :,
                    a:a + stride * (od - 1) + 1:stride,
                    bb:bb + stride * (oh - 1) + 1:stride,
                    cc:cc + stride * (ow - 1) + 1:stride,
                ]
                i += 1
    return cols.reshape(b, c * k ** 3, od * oh * ow), (od, oh, ow)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    b, c, d, h, w = x_shape
    od, oh, ow = (_out_size(n, k, stride, pad) for n in (d, h, w))
    cols = cols.reshape(b, c, k * k * k, od, oh, ow)
    xp = np.zeros((b, c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    i = 0
    for a in range(k):
        for bb in range(k):
            for cc in range(k):
                xp[
                    :, :,
                    a:a + stride * (od - 1) + 1:stride,
                    bb:bb + stride * (oh - 1) + 1:stride,
                    cc:cc + stride * (ow - 1) + 1:stride,
                ] += cols[:, :, i]
                i += 1
    return xp[:, :, pad:pad + d, pad:pad + h, pad:pad + w]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 1) -> Tensor:
    """Batched 3D convolution. ``x``: (B, Cin, D, H, W); ``w``: (Cout, Cin, k, k, k)."""
    if x.data.ndim != 5 or w.data.ndim != 5 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv3d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[2]
    cout = w.shape[0]
    cols, (od, oh, ow) = _im2col(x.data, k, stride, pad)
    wm = w.data.reshape(cout, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(x.shape[0], cout, od, oh, ow)

    def bw(g):
        gm = g.reshape(x.shape[0], cout, -1)
        dx = _col2im(np.matmul(wm.T, gm), x.shape, k, stride, pad) if x.requires_grad else None
        dw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, gm.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None, out_size: int, stride: int = 2, pad: int = 1) -> Tensor:
    """Adjoint of :func:`conv3d`. ``w``: (Cin, Cout, k, k, k); output is cubic ``out_size``."""
    if x.data.ndim != 5 or w.data.ndim != 5 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv_transpose3d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[2]
    cin, cout = w.shape[0], w.shape[1]
    if _out_size(out_size, k, stride, pad) != x.shape[2]:
        raise DimensionError(f"conv_transpose3d: out_size {out_size} does not invert grid {x.shape[2:]}")
    bsz = x.shape[0]
    y_shape = (bsz, cout, out_size, out_size, out_size)
    wm = w.data.reshape(cin, -1)
    xf = x.data.reshape(bsz, cin, -1)
    out = _col2im(np.matmul(wm.T, xf), y_shape, k, stride, pad)
    if b is not None:
        out = out + b.data[None, :, None, None, None]

    def bw(g):
        gcols, _ = _im2col(g, k, stride, pad)
        dx = np.matmul(wm, gcols).reshape(x.shape) if x.requires_grad else None
        dw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3, 4))

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, bw, "conv_transpose3d")
