"""Exception hierarchy.

Input problems derive from :class:`ValidationError` (a ``ValueError``);
numerical breakdowns derive from :class:`NumericalError`. The CLI maps the
two families to distinct exit codes.
"""


class TransferDRError(Exception):
    """Base class for all package errors."""


class ValidationError(TransferDRError, ValueError):
    """Malformed, non-finite or undersized input data."""


class NumericalError(TransferDRError, ArithmeticError):
    """A numerical routine could not produce a trustworthy answer."""


class RatioOverflowError(NumericalError):
    """A density-ratio linear predictor exceeded the exponent guard."""

    def __init__(self, value, limit):
        self.value = float(value)
        self.limit = float(limit)
        super().__init__(
            f"density-ratio linear predictor {self.value:.6g} exceeds overflow guard {self.limit:g}"
        )


class ConvergenceError(NumericalError):
    """Newton iterations failed even after Levenberg damping."""


class RankDeficiencyError(NumericalError):
    """Design matrix of the imputation regression is rank deficient."""

    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        super().__init__(message)


class SingularSystemError(NumericalError):
    """Estimating-equation system is singular or too ill-conditioned."""

    def __init__(self, method, condition):
        self.method = method
        self.condition = float(condition)
        super().__init__(
            f"{method} estimating equations are singular or ill-conditioned "
            f"(condition estimate {self.condition:.3e})"
        )


class BootstrapError(NumericalError):
    """Too many bootstrap replicates failed."""

    def __init__(self, message, causes):
        self.causes = dict(causes)
        super().__init__(message)
