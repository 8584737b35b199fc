"""Exception types shared across the package.

The CLI maps these onto exit codes: argument/config/shape problems exit 2,
container format problems exit 3, numeric failures exit 4.
"""


class StructuralError(ValueError):
    """A skeleton graph violates the tree invariants."""


class ShapeError(ValueError):
    """Tensor shapes do not line up."""


class ConfigError(ValueError):
    """A model/training configuration is inconsistent."""


class FormatError(ValueError):
    """A binary container (dataset or checkpoint) is malformed."""


class NumericError(ArithmeticError):
    """NaN or infinite values where finite ones are required."""
