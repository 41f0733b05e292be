"""Exception hierarchy shared across the package."""


class MarrowError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MarrowError):
    """Operand dimensions are incompatible."""


class NumericError(MarrowError):
    """Non-finite values appeared where finite ones are required."""


class ContractError(MarrowError):
    """An operation precondition was violated by the caller."""


class LengthError(ContractError):
    """A token sequence exceeds the model's maximum length."""


class ConfigError(MarrowError):
    """Invalid or inconsistent configuration."""


class DependencyError(MarrowError):
    """A pipeline stage ran before the stages it depends on."""


class DataError(MarrowError):
    """Malformed input data; message carries file/line context when known."""
