"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
GeometryError -> 3, NumericError -> 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(RuntimeError):
    """Dataset or file-format problem (bad magic, degenerate sample, ...)."""


class GeometryError(ValueError):
    """Operation requires a structured grid but got unstructured input."""


class NumericError(ArithmeticError):
    """Non-finite values or a solver that failed to converge."""


class ContractError(RuntimeError):
    """A documented precondition was violated (non-scalar loss, missing
    gradient, negative probabilities, ...)."""
