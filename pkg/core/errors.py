"""Exception hierarchy shared by the integrators, samplers and the CLI."""


class PamError(Exception):
    """Base class for every error raised by this package"""


class ContractError(PamError, ValueError):
    """A caller broke a precondition (window length, grid alignment, ...)"""


class InvalidParameterError(ContractError):
    """Model or method parameters outside their admissible range"""


class ConfigError(ContractError):
    """Experiment configuration could not be resolved"""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericalError(PamError, ArithmeticError):
    """A numerical procedure failed; `step` is the grid index when known"""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step

    def __str__(self):
        base = super().__str__()
        if self.step is None:
            return base
        return f"{base} (step {self.step})"


class DivergenceError(NumericalError):
    """Non-finite state produced during a solve"""


class SolverError(NumericalError):
    """Newton iteration did not reach tolerance"""

    def __init__(self, message, residual, step=None):
        super().__init__(message, step=step)
        self.residual = residual


class StepSizeError(NumericalError):
    """Step too large for the implicit solve to be well posed"""


class MatrixError(NumericalError):
    """Scale matrix is not symmetric positive-definite"""


class DiagnosticsError(NumericalError):
    """Sampler diagnostics indicate a badly mismatched reference measure"""
