"""Exception hierarchy shared by the estimation engine."""

from __future__ import annotations


class ProbitError(Exception):
    """Base class for all errors raised by :mod:`epprobit`."""


class DegenerateMass(ProbitError, ArithmeticError):
    """Truncated mass underflowed below the representable floor."""

    def __init__(self, log_mass: float):
        super().__init__(f"truncated mass underflow (log mass {log_mass:.6g})")
        self.log_mass = log_mass


class InvalidOutcome(ProbitError, ValueError):
    pass


class NotInvolutory(ProbitError, ValueError):
    pass


class DimensionMismatch(ProbitError, ValueError):
    pass


class EmptySubset(ProbitError, ValueError):
    pass


class NotPositiveDefinite(ProbitError, ValueError):
    pass


class InfeasibleRegion(ProbitError, ArithmeticError):
    """Every truncation factor had vanishing tilted mass."""


class NotConverged(ProbitError, RuntimeError):
    """EP stopped at its sweep limit; ``result`` holds the last iterate."""

    def __init__(self, sweeps: int, residual: float, result=None):
        super().__init__(f"EP not converged after {sweeps} sweeps (residual {residual:.3g})")
        self.sweeps = sweeps
        self.residual = residual
        self.result = result


class SingularDesign(ProbitError, ArithmeticError):
    pass


class NearSingularShat(ProbitError, ArithmeticError):
    def __init__(self, lambda_min: float, lambda_max: float):
        super().__init__(
            f"conditional sample covariance is near singular "
            f"(lambda_min={lambda_min:.3g}, lambda_max={lambda_max:.3g})"
        )
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max


class BracketFailure(ProbitError, ArithmeticError):
    pass


class NoProgress(ProbitError, RuntimeError):
    """EM lower bound kept decreasing; ``trace`` holds the iterations so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class NoFeasibleStart(ProbitError, RuntimeError):
    pass


class AcceptanceTooLow(ProbitError, RuntimeError):
    def __init__(self, rate: float):
        super().__init__(f"rejection acceptance rate {rate:.2e} is below 1e-4; use the Gibbs sampler")
        self.rate = rate
