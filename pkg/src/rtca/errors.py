"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """Mismatched shapes, fingerprints, or invalid configuration values."""


class UsageError(RuntimeError):
    """An operation was called in a state where it is not allowed."""


class CheckpointError(ValueError):
    """A checkpoint file could not be decoded."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""
