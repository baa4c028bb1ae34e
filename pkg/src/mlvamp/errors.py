"""Exception types shared across the package."""


class MlvampError(Exception):
    """Base class for all package-specific failures."""


class InvalidModelError(MlvampError, ValueError):
    """A network description or argument violates a structural requirement."""


class DegenerateModelError(MlvampError, ValueError):
    """A model is structurally valid but numerically unusable (e.g. zero signal power)."""


class UndefinedMetricError(MlvampError, ValueError):
    """A metric was requested on inputs where it is undefined (e.g. zero reference)."""


class NumericFailureError(MlvampError, RuntimeError):
    """A numerical routine produced non-finite or infeasible values."""


class DivergedIterationError(MlvampError, RuntimeError):
    """The iteration left its admissible region; carries layer/iteration context."""

    def __init__(self, message, layer=None, iteration=None, trace=None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration
        self.trace = trace
