"""Sequence-learning library built around a gateless recurrent cell.

The package provides a small dense linear-algebra kernel with explicit
reverse-mode gradients, a zoo of recurrent cells (fusion, elman, gru, lstm)
with exact parameter and multiplication counters, a travel-time regression
model over link sequences, a synthetic trip generator, and a training loop.
"""

from .errors import DivergenceError, DomainError, ShapeError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "DivergenceError",
    "DomainError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
