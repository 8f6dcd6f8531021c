"""Exception hierarchy shared across the package."""


class LayerwiseError(Exception):
    """Base class for all package errors."""


class ConfigError(LayerwiseError, ValueError):
    """A scene or training configuration failed validation.

    ``key`` names the offending entry (a dotted path such as
    ``layers[1].aabb``) when one can be identified.
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class DegenerateViewError(LayerwiseError, ValueError):
    """The camera sees nothing useful (e.g. every joint lies behind it)."""


class ProviderError(LayerwiseError, RuntimeError):
    """A guidance provider failed to produce a residual."""


class ProviderTimeout(ProviderError):
    """The remote provider did not answer in time; the call may be retried."""

    retriable = True


class ProtocolError(ProviderError):
    """The remote provider answered with a malformed payload."""


class ServiceError(ProviderError):
    """The remote provider answered with a non-2xx status."""

    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message)


class CheckpointError(LayerwiseError, IOError):
    """A checkpoint file is truncated, corrupted or of the wrong version."""


class TrainingError(LayerwiseError, RuntimeError):
    """A training stage aborted; ``iteration`` is the failing step (1-based)."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
