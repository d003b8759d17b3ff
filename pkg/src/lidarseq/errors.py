class LidarSeqError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LidarSeqError, ValueError):
    """Inconsistent shapes or invalid configuration values."""


class UsageError(LidarSeqError, ValueError):
    """A call that violates an operation's preconditions."""


class TrainingError(LidarSeqError, RuntimeError):
    """Problems detected while optimising (NaNs, missing gradients)."""


class FormatError(LidarSeqError, ValueError):
    """Malformed, truncated or incompatible binary file."""
