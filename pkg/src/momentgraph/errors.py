"""Exception hierarchy shared across the package."""


class MomentGraphError(Exception):
    """Base class for all package errors."""


class DimensionError(MomentGraphError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(MomentGraphError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(MomentGraphError, ValueError):
    """A precondition on the call itself was violated."""


class DataError(MomentGraphError, ValueError):
    """Input data is inconsistent with the model or the manifest."""


class FormatError(DataError):
    """A binary file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MomentGraphError, ValueError):
    """Invalid run configuration."""
