"""Exception types shared across the package."""


class CmknError(Exception):
    """Base class for package errors."""


class ParseError(CmknError, ValueError):
    """Malformed input data (FASTA, HIVdb tables, model files)."""


class ConfigError(CmknError, ValueError):
    """Invalid configuration or parameter bundle."""


class FormatVersionError(ParseError):
    """Model file written by an incompatible format version."""


class StaleCacheError(CmknError, RuntimeError):
    """Anchor parameters changed after the inverse square root was cached."""


class NumericalError(CmknError, ArithmeticError):
    """Non-finite values during training or evaluation."""
