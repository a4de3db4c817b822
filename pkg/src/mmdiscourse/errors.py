"""Exception types shared across the package."""


class DiscourseError(Exception):
    """Base class for user-facing errors (bad input, missing resources)."""


class DatasetError(DiscourseError):
    """Malformed dataset files, unknown labels, missing records or captions."""


class ConfigError(DiscourseError):
    """Unknown or invalid configuration keys and values."""


class BackendError(DiscourseError):
    """A pretrained backend cannot be loaded or run."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
