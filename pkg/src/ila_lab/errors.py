"""Exception hierarchy shared across the package."""


class IlaLabError(Exception):
    """Base class for all package errors."""


class DimensionError(IlaLabError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(IlaLabError, ValueError):
    """A configuration is infeasible or inconsistent."""


class InputError(IlaLabError, ValueError):
    """Invalid data passed to an operation (e.g. out-of-range labels)."""


class UsageError(IlaLabError, RuntimeError):
    """An API was called in a state where it cannot proceed."""


class DivergenceError(IlaLabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float, detail: str = ""):
        super().__init__(detail or f"non-finite loss {loss!r} at optimizer step {step}")
        self.step = step
        self.loss = loss

    def __reduce__(self):
        # keeps the error intact across process-pool boundaries
        return (type(self), (self.step, self.loss, str(self)))


class CheckpointError(IlaLabError, ValueError):
    """A checkpoint manifest does not match the model it is loaded into."""
