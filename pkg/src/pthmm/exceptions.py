class THMMError(Exception):
    """Base class for errors raised by pthmm."""


class DomainError(THMMError, ValueError):
    """An argument lies outside the support or parameter space."""


class DegenerateCovariateError(THMMError, ValueError):
    """A covariate series is constant and cannot be standardized."""


class InputError(THMMError, ValueError):
    """Malformed data: non-finite covariates, misaligned tracks, bad rows."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ConvergenceError(THMMError, RuntimeError):
    """Every optimization attempt failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
