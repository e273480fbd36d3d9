"""Reverse-mode differentiation over the dense kernels in :mod:`linalg`.

A :class:`Tensor` wraps one 2-D float64 array and remembers how it was
produced; calling :meth:`Tensor.backward` on a result replays the recorded
trace in reverse topological order and accumulates exact gradients into
every tensor that requires them.  Ops are module-level functions so the
optional multiplication counter can be threaded through the same code path
that training uses.

Only forward arithmetic is counted; backward passes never touch a counter,
matching the convention that per-cell multiplication counts describe
inference cost.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import linalg
from .errors import ShapeError
from .linalg import OpCounter


class Tensor:
    """A 2-D float64 value plus the trace needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = linalg.as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, upstream=None) -> None:
        """Propagate ``upstream`` (d-loss / d-self) back through the trace.

        Without an argument the tensor must be 1x1 and is seeded with 1.
        """
        if upstream is None:
            if self.data.shape != (1, 1):
                raise ShapeError(
                    f"backward() without an upstream gradient requires a 1x1 tensor, got {self.data.shape}"
                )
            upstream = np.ones((1, 1))
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.data.shape:
            raise ShapeError(f"upstream gradient shape {upstream.shape} != value shape {self.data.shape}")

        order = _toposort(self)
        _accumulate(self, upstream)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; unrolled recurrences overflow Python's stack otherwise.
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor, counter: OpCounter | None = None) -> Tensor:
    val = linalg.matmul(a.data, b.data, counter)

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(val, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Addition; ``b`` may be a column bias broadcast over a's columns."""
    val = linalg.add(a.data, b.data)
    broadcast = b.data.shape != a.data.shape

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=1, keepdims=True) if broadcast else g)

    return _make(val, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor, counter: OpCounter | None = None) -> Tensor:
    """Elementwise (Hadamard) product of same-shaped tensors."""
    val = linalg.elementwise_mul(a.data, b.data, counter)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(val, (a, b), backward)


def _tanh_grad(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def tanh(a: Tensor) -> Tensor:
    val = linalg.tanh_map(a.data)

    def backward(g):
        _accumulate(a, g * _tanh_grad(val))

    return _make(val, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    val = linalg.sigmoid_map(a.data)

    def backward(g):
        _accumulate(a, g * val * (1.0 - val))

    return _make(val, (a,), backward)


_KINK_WATCH: list | None = None


@contextmanager
def kink_watch(dest: list):
    """Record, into ``dest``, how close each relu input comes to zero.

    Finite-difference gradient checks are invalid within a step of the relu
    kink; callers use this to verify an evaluation point keeps clear of it.
    """
    global _KINK_WATCH
    _KINK_WATCH = dest
    try:
        yield dest
    finally:
        _KINK_WATCH = None


def relu(a: Tensor) -> Tensor:
    val = linalg.relu_map(a.data)
    if _KINK_WATCH is not None and a.data.size:
        _KINK_WATCH.append(float(np.abs(a.data).min()))

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _make(val, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    val = linalg.softplus_map(a.data)

    def backward(g):
        _accumulate(a, g * linalg.sigmoid_map(a.data))

    return _make(val, (a,), backward)


def affine(W: Tensor, x: Tensor, b: Tensor, counter: OpCounter | None = None) -> Tensor:
    """W @ x + b, the bias broadcast over columns."""
    return add(matmul(W, x, counter), b)


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {p.data.shape} vs {cols} columns")
    val = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi, :])

    return _make(val, tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    val = a.data[start:stop, :].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        _accumulate(a, full)

    return _make(val, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    val = a.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _make(val, (a,), backward)


def gather_cols(table: Tensor, ids: np.ndarray) -> Tensor:
    """Column lookup ``table[:, ids]``; gradients scatter-add into the table.

    Repeated ids are allowed and accumulate.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"gather_cols expects a 1-D id vector, got shape {ids.shape}")
    val = table.data[:, ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full.T, ids, g.T)
        _accumulate(table, full)

    return _make(val, (table,), backward)


def scale_cols(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scale column j by the constant weights[j] (not differentiated through)."""
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != a.data.shape[1]:
        raise ShapeError(f"scale_cols weight length {w.shape[1]} != {a.data.shape[1]} columns")

    def backward(g):
        _accumulate(a, g * w)

    return _make(a.data * w, (a,), backward)


def mask_columns(mask: np.ndarray, taken: Tensor, kept: Tensor) -> Tensor:
    """Per-column select: column j is taken[:, j] where mask[j] is 1, else kept[:, j].

    The mask is a constant 0/1 vector; used to freeze finished sequences in
    padded batches.
    """
    m = np.asarray(mask, dtype=np.float64).reshape(1, -1)
    if taken.data.shape != kept.data.shape:
        raise ShapeError(f"mask_columns shape mismatch: {taken.data.shape} vs {kept.data.shape}")
    if m.shape[1] != taken.data.shape[1]:
        raise ShapeError(f"mask length {m.shape[1]} != {taken.data.shape[1]} columns")
    val = taken.data * m + kept.data * (1.0 - m)

    def backward(g):
        _accumulate(taken, g * m)
        _accumulate(kept, g * (1.0 - m))

    return _make(val, (taken, kept), backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a 1x1 tensor."""
    val = np.array([[a.data.sum()]])

    def backward(g):
        _accumulate(a, np.full_like(a.data, g[0, 0]))

    return _make(val, (a,), backward)
