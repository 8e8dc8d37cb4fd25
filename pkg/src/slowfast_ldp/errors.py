"""Exception hierarchy shared by all modules."""


class SlowFastError(Exception):
    """Base class for every error raised by this package."""


class InvalidModelError(SlowFastError, ValueError):
    pass


class ModelEvaluationError(SlowFastError):
    """A coefficient returned a non-finite value."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class RangeError(SlowFastError, ValueError):
    pass


class StabilityError(SlowFastError, ValueError):
    """Step size too large to resolve the fast drift."""


class BlowUpError(SlowFastError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractError(SlowFastError):
    pass


class SingularQError(SlowFastError, ArithmeticError):
    pass


class NotDissipativeError(SlowFastError):
    pass


class ResolutionError(SlowFastError, ValueError):
    pass


class EstimatorStarvedError(SlowFastError):
    pass


class InsufficientDataError(SlowFastError, ValueError):
    pass


class ConfigError(SlowFastError, ValueError):
    pass
