"""Exception hierarchy shared by every module."""


class EmoeError(Exception):
    """Base class for all package errors."""


class ShapeError(EmoeError, ValueError):
    pass


class ParameterError(EmoeError, ValueError):
    pass


class ContractError(EmoeError, ValueError):
    """A precondition of an operation was violated."""


class DegeneracyError(EmoeError, ArithmeticError):
    pass


class ConfigError(EmoeError, ValueError):
    pass


class FormatError(EmoeError, ValueError):
    """A file does not have the expected binary layout."""


class CorruptionError(FormatError):
    pass


class NumericError(EmoeError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
