"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class ObbStackError(Exception):
    """Base class for all package errors."""


class ConfigError(ObbStackError):
    """Invalid configuration or command-line usage."""


class DataError(ObbStackError):
    """Malformed, inconsistent, or contract-violating input data."""


class InvalidGeometryError(DataError):
    """Non-finite, non-positive, or degenerate box geometry."""


class ParseError(DataError):
    """Unparseable line in a detection or label file."""

    def __init__(self, message, path=None, line_no=None):
        if path is not None:
            message = f"{path}:{line_no}: {message}"
        super().__init__(message)
        self.path = path
        self.line_no = line_no


class SchemaError(DataError):
    """Unknown or incompatible serialized-file schema."""


class ContractError(DataError):
    """A documented precondition of an operation was violated."""


class DegenerateDataError(DataError):
    """Training data unusable, e.g. only one class present."""


class NumericalError(ObbStackError):
    """Numerical failure during optimization or calibration."""


class CalibrationError(NumericalError):
    """Temperature fitting produced a non-positive slope."""


class ConvergenceWarning(UserWarning):
    """Optimizer stopped at its iteration cap before reaching tolerance."""
