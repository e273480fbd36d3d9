"""Dense float64 kernels with an explicit scalar-multiplication counter.

Matrices are plain 2-D ``numpy.ndarray`` values in row-major order; every
kernel that multiplies scalars takes an optional :class:`OpCounter` and adds
exactly the number of scalar multiplications it performs.  Additions,
negations, and activation-function evaluations are free under this
convention, which is what makes the per-cell multiplication formulas in
:mod:`fusion_eta.cells` exact.

Broadcasting is deliberately restricted: the only allowed mismatch is a
column-vector bias added across the columns of a matrix.  Everything else
raises :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class OpCounter:
    """Accumulator for scalar multiplications performed by counted kernels.

    An (a x b) @ (b x c) product adds a*b*c; an elementwise product of two
    (r x c) matrices adds r*c.
    """

    __slots__ = ("multiplications",)

    def __init__(self):
        self.multiplications = 0

    def add(self, count: int) -> None:
        self.multiplications += int(count)

    def reset(self) -> None:
        self.multiplications = 0

    def __repr__(self):
        return f"OpCounter(multiplications={self.multiplications})"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds yield identical streams on
    every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent, reproducible child generators from one seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def as_matrix(values) -> np.ndarray:
    """Coerce to a 2-D float64 array; 1-D input becomes a column vector."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {a.ndim}-D data of shape {a.shape}")
    return a


def _require_2d(a: np.ndarray, name: str) -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got {getattr(a, 'shape', type(a))}")


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Matrix product a @ b. Counts a.rows * a.cols * b.cols multiplications."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def elementwise_mul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Hadamard product. Counts rows * cols multiplications."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1])
    return a * b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix addition; ``b`` may be an (n x 1) bias broadcast over columns."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape == b.shape:
        return a + b
    if b.shape == (a.shape[0], 1):
        return a + b
    raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape} (only column-bias broadcast allowed)")


def tanh_map(a: np.ndarray) -> np.ndarray:
    _require_2d(a, "a")
    return np.tanh(a)


def sigmoid_map(a: np.ndarray) -> np.ndarray:
    """Entrywise logistic function, computed stably for large |x|."""
    _require_2d(a, "a")
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def relu_map(a: np.ndarray) -> np.ndarray:
    _require_2d(a, "a")
    return np.maximum(a, 0.0)


def softplus_map(a: np.ndarray) -> np.ndarray:
    """Entrywise log(1 + exp(x)), overflow-safe."""
    _require_2d(a, "a")
    return np.log1p(np.exp(-np.abs(a))) + np.maximum(a, 0.0)


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """W @ x + b with the bias broadcast over columns."""
    return add(matmul(W, x, counter), b)
