"""Exception types shared across the library.

The CLI maps these onto process exit codes: validation/shape/domain
problems exit 2, numeric divergence exits 3, I/O failures exit 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested kernel."""


class DomainError(ValueError):
    """Input values fall outside the mathematical domain of an operation."""


class ValidationError(ValueError):
    """A config, dataset, or argument failed structural validation."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
