"""Exception types raised by the solvers and measure utilities."""


class DoubaError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DoubaError, ValueError):
    pass


class DomainMismatchError(DoubaError, ValueError):
    """Two objects that must share a support or grid do not."""


class UnsupportedDimensionError(DoubaError, ValueError):
    pass


class NumericalFailureError(DoubaError, ArithmeticError):
    """A solver produced non-finite values."""


class ConsistencyError(DoubaError):
    """Quantities that must agree at convergence disagree beyond tolerance."""


class StepSizeError(DoubaError):
    """Dual ascent kept decreasing the objective; retry with a smaller step."""


class CertificateUndefinedError(DoubaError, ValueError):
    pass


class SolverError(DoubaError):
    """Wraps a failure inside one of the K per-marginal solves."""

    def __init__(self, index, cause):
        super().__init__(f"marginal {index}: {cause}")
        self.index = index
        self.cause = cause


class ConfigError(DoubaError, ValueError):
    """A config file or input file is missing, unreadable or malformed.

    ``key`` names the offending config key or file path.
    """

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
