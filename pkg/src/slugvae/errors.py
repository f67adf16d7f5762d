"""Exception hierarchy shared by all modules."""


class SlugError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SlugError, ValueError):
    """Shapes, layouts or configuration values do not fit together."""


class NumericError(SlugError, ArithmeticError):
    """A computation produced a non-finite value."""


class TrainingError(SlugError, RuntimeError):
    """Training diverged; ``epoch`` holds the offending epoch index."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class LoadError(SlugError, OSError):
    """A file could not be decoded into the expected artifact."""


class OracleRefusal(SlugError, ValueError):
    """A dense oracle was asked to materialize something above its size cap."""
