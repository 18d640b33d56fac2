class SmugError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(SmugError, ValueError):
    """Input data has the wrong shape or contains non-finite values."""


class ConfigError(SmugError, ValueError):
    """A configuration is infeasible or inconsistent."""


class RecordingError(SmugError, ValueError):
    """An operation could not be recorded on a tape."""


class UsageError(SmugError, RuntimeError):
    """An API was called in a way its contract does not allow."""
