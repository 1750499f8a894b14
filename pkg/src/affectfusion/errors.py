"""Exception hierarchy shared by every module."""


class AffectError(Exception):
    """Base class for all package errors."""


class ConfigError(AffectError, ValueError):
    """Invalid configuration: bad dims, rates, or flags."""


class ShapeError(AffectError, ValueError):
    pass


class EmptySequenceError(AffectError, ValueError):
    pass


class InsufficientDataError(AffectError, ValueError):
    pass


class DegenerateInputError(AffectError, ValueError):
    pass


class UsageError(AffectError, RuntimeError):
    pass


class NumericalError(AffectError, ArithmeticError):
    pass


class DataError(AffectError, ValueError):
    """Malformed or inconsistent on-disk data."""


class ChecksumError(DataError):
    pass


class SchemaVersionError(DataError):
    pass
