"""Exception hierarchy shared by every fedtl module."""


class FtlError(Exception):
    """Base class; the CLI maps any subclass to a structured nonzero exit."""

    kind = "error"


class DimensionError(FtlError, ValueError):
    kind = "dimension"


class DomainError(FtlError, ValueError):
    """Input outside the domain of a matrix function (e.g. log of a non-SPD matrix)."""

    kind = "domain"


class RangeError(FtlError, OverflowError):
    kind = "range"


class ConvergenceError(FtlError, RuntimeError):
    kind = "convergence"

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceError(FtlError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    kind = "divergence"

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class FormatError(FtlError, ValueError):
    kind = "format"


class ConfigError(FtlError, ValueError):
    kind = "config"


class RoundAborted(FtlError, RuntimeError):
    """A federated round failed; server and clients were restored to the pre-round snapshot."""

    kind = "round"
