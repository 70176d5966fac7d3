"""Shared exception types, mapped to CLI exit statuses in one place."""


class MultiattnError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(MultiattnError):
    """Caller misuse: bad arguments, bad call order, empty inputs."""


class ConfigError(UsageError):
    """Invalid or inconsistent configuration value."""


class DimensionError(UsageError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(MultiattnError):
    """Problem with corpus or vocabulary content."""


class ParseError(DataError):
    """Malformed corpus file; message carries the line number."""


class VocabularyError(DataError):
    """Token index outside the vocabulary; message carries the position."""


class NumericError(MultiattnError):
    """Non-finite value encountered; message names the offending tensor."""
