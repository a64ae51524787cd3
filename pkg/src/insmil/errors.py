"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigurationError -> 2 (bad invocation/config),
everything else here -> 1 (runtime failure).
"""


class InsmilError(Exception):
    """Base class for all package errors."""


class ConfigurationError(InsmilError):
    """A config value is out of range or inconsistent; message names the field."""


class DimensionError(InsmilError):
    """Array shapes do not agree with the declared layer/feature dimensions."""


class ValidationError(InsmilError):
    """A numeric input violates a documented precondition (norm, simplex, ...)."""


class UsageError(InsmilError):
    """An operation was called in a state its contract forbids."""


class DataError(InsmilError):
    """Dataset content is unusable for the requested operation."""


class ParseError(DataError):
    """A persisted file could not be decoded; message names the record."""


class SchemaError(DataError):
    """A persisted file decoded but violates the documented schema."""


class UndefinedAucError(DataError):
    """ROC-AUC requested on a single-class label vector."""


class NumericalError(InsmilError):
    """A loss or gradient became non-finite."""
