"""Exception types shared across the package."""


class BundleFormatError(Exception):
    """Raised when a tensor file or manifest is structurally invalid.

    ``offset`` is the byte offset at which the problem was detected, when known.
    """

    def __init__(self, message, offset=None, path=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.offset = offset
        self.path = path


class BundleValidationError(Exception):
    """Raised when a structurally valid bundle violates a semantic invariant."""


class BackendStateError(RuntimeError):
    """Raised when a backend is used before it holds the state it needs."""


class NonFiniteLossError(RuntimeError):
    """Raised when the optimization loop hits a non-finite loss.

    Carries the loss trace accumulated up to the failing step.
    """

    def __init__(self, step, trace):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trace = trace


class UndefinedMetricError(ValueError):
    """Raised when a metric has no valid class to average over."""
