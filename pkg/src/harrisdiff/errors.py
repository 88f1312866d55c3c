"""Exception types shared across modules."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConstraintError(ValueError):
    """A structural constraint between parameters is violated."""


class ShapeError(ValueError):
    """Array or list lengths do not match."""


class AccuracyError(RuntimeError):
    """A numerical routine failed to reach its tolerance."""

    def __init__(self, message, estimate=None, error=None):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class SamplerFault(RuntimeError):
    """The reverse chain produced a non-finite state."""

    def __init__(self, step, message="non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step
