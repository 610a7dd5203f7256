"""Exception types shared across the package."""


class SentOrderError(Exception):
    """Base class for package errors."""


class DimensionError(SentOrderError, ValueError):
    pass


class DomainError(SentOrderError, ValueError):
    pass


class TapeError(SentOrderError, RuntimeError):
    pass


class NumericError(SentOrderError, FloatingPointError):
    pass


class DeterminismError(SentOrderError, RuntimeError):
    pass


class VocabularyError(SentOrderError, ValueError):
    pass


class ConfigError(SentOrderError, ValueError):
    pass


class FormatError(SentOrderError, ValueError):
    pass


class CorruptionError(SentOrderError, ValueError):
    pass
