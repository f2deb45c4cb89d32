"""Exception hierarchy shared across the package."""


class LogstabError(Exception):
    """Base class for all package errors."""


class DimensionError(LogstabError, ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(LogstabError, ValueError):
    """An input violates a documented precondition."""


class CapacityError(LogstabError, ValueError):
    """Problem size exceeds what an exhaustive routine will enumerate."""


class DivergenceError(LogstabError, ArithmeticError):
    """A trajectory or a loss became non-finite.

    Attributes
    ----------
    step : int or None
        Index of the step where the non-finite value first appeared.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(LogstabError, ValueError):
    """A configuration or input file is malformed."""


class NonConvergenceError(LogstabError, RuntimeError):
    """An iterative method stopped before meeting its tolerance.

    The partial result, if any, is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
