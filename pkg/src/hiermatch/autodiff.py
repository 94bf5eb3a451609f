"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive below computes its forward value eagerly and, when any
input requires a gradient, attaches a closure that pushes the output
gradient back onto its inputs.  ``backward`` walks the recorded graph in
reverse topological order.

Broadcasting is deliberately limited to adding a length-``n`` row vector
to an ``m x n`` matrix (a bias).  Anything else with mismatched shapes is
rejected.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "hadamard",
    "scalar_mul",
    "scale_by",
    "relu",
    "sigmoid",
    "softmax_rows",
    "concat_last_dim",
    "sum",
    "mean_rows",
    "sq_euclidean",
    "take",
    "index",
    "pair_concat",
    "merge_rows",
    "straight_through",
    "topological_order",
    "backward",
    "zero_grads",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape).copy())


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never in-place: several parents may receive the same gradient array
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", _bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D operand, got {a.shape}")

    def _bw(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), "transpose", _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        def _bw(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g)
        return _make(a.data + b.data, (a, b), "add", _bw)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def _bw_bias(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0))
        return _make(a.data + b.data, (a, b), "add_bias", _bw_bias)
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(a.data - b.data, (a, b), "sub", _bw)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "hadamard")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), "hadamard", _bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), "scalar_mul", _bw)


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the scalar tensor ``s`` (both differentiable)."""
    if s.data.ndim != 0:
        raise ShapeError(f"scale_by: expected a scalar multiplier, got shape {s.shape}")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * s.data)
        if s.requires_grad:
            _accum(s, np.asarray(np.sum(g * a.data)))

    return _make(a.data * s.data, (a, s), "scale_by", _bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _bw(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), "relu", _bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(np.atleast_1d(a.data)).reshape(a.shape)

    def _bw(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), "sigmoid", _bw)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis; a 1-D input is treated as a single row."""
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"softmax_rows: expected 1-D or 2-D operand, got {a.shape}")
    y = _softmax_np(a.data)

    def _bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), "softmax_rows", _bw)


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last_dim: leading shapes differ, {a.shape} vs {b.shape}")
    k = a.shape[-1]

    def _bw(g):
        if a.requires_grad:
            _accum(a, g[..., :k])
        if b.requires_grad:
            _accum(b, g[..., k:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat", _bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the math name
    def _bw(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum()), (a,), "sum", _bw)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the rows of an ``N x d`` matrix, giving a ``1 x d`` matrix."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows: expected 2-D operand, got {a.shape}")
    n = a.shape[0]

    def _bw(g):
        _accum(a, np.repeat(g / n, n, axis=0))

    return _make(a.data.mean(axis=0, keepdims=True), (a,), "mean_rows", _bw)


def sq_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance ``||a - b||^2`` as a scalar tensor."""
    _check_same(a, b, "sq_euclidean")
    diff = a.data - b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, 2.0 * g * diff)
        if b.requires_grad:
            _accum(b, -2.0 * g * diff)

    return _make(np.asarray(np.sum(diff * diff)), (a, b), "sq_euclidean", _bw)


def take(a: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Gather entries of ``a`` (row-major flat indexing) into a 1-D tensor."""
    flat_idx = np.asarray(flat_idx, dtype=np.intp)
    if flat_idx.size == 0:
        raise ShapeError("take: empty index set")
    if flat_idx.min() < 0 or flat_idx.max() >= a.data.size:
        raise ShapeError(f"take: index out of range for shape {a.shape}")

    def _bw(g):
        full = np.zeros(a.data.size)
        np.add.at(full, flat_idx, g)
        _accum(a, full.reshape(a.shape))

    return _make(a.data.reshape(-1)[flat_idx], (a,), "take", _bw)


def index(a: Tensor, i: int) -> Tensor:
    """Scalar tensor holding entry ``i`` of a 1-D tensor."""
    if a.data.ndim != 1 or not 0 <= i < a.shape[0]:
        raise ShapeError(f"index: invalid index {i} for shape {a.shape}")

    def _bw(g):
        full = np.zeros_like(a.data)
        full[i] = g
        _accum(a, full)

    return _make(np.asarray(a.data[i]), (a,), "index", _bw)


def pair_concat(x: Tensor, i: int, j: int) -> Tensor:
    """``[x_i, x_j]`` as a ``1 x 2d`` row, for rows ``i`` and ``j`` of ``x``."""
    n, d = x.shape

    if not (0 <= i < n and 0 <= j < n):
        raise ShapeError(f"pair_concat: rows ({i}, {j}) out of range for {n} rows")

    def _bw(g):
        full = np.zeros_like(x.data)
        full[i] += g[0, :d]
        full[j] += g[0, d:]
        _accum(x, full)

    return _make(np.concatenate([x.data[i], x.data[j]])[None, :], (x,), "pair_concat", _bw)


def merge_rows(x: Tensor, a: int, b: int, new: Tensor) -> Tensor:
    """Replace row ``a`` of ``x`` by the single row ``new`` and delete row ``b``."""
    n, d = x.shape
    if not (0 <= a < b < n):
        raise ShapeError(f"merge_rows: need 0 <= a < b < {n}, got a={a}, b={b}")
    if new.shape != (1, d):
        raise ShapeError(f"merge_rows: replacement must be 1 x {d}, got {new.shape}")
    keep = np.delete(np.arange(n), b)
    out = x.data[keep]
    out[a] = new.data[0]

    def _bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[keep] = g
            full[a] = 0.0
            _accum(x, full)
        if new.requires_grad:
            _accum(new, g[a][None, :])

    return _make(out, (x, new), "merge_rows", _bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; the gradient is passed unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shape mismatch {hard.shape} vs {soft.shape}")

    def _bw(g):
        _accum(soft, g)

    return _make(hard, (soft,), "straight_through", _bw)


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every differentiable input reachable from ``loss``.

    Gradients accumulate into whatever ``.grad`` already holds; call
    ``zero_grad`` on the leaves first.  Returns the computation record
    (topologically ordered) that was replayed.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    order = topological_order(loss)
    for node in order:
        if not node.is_leaf:
            # interior nodes start clean on every call
            node.grad = None
    loss.grad = np.ones(()) if loss.grad is None else loss.grad + 1.0
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return order


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
