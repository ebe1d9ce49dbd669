from typing import Any, Dict, List, Optional


class BaseAppException(Exception):
    """Base exception for the application."""

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(self.message)


class InvalidGammaError(BaseAppException):
    """Exception raised when an exchange rate would be negative."""

    def __init__(self, message: str, gamma: float, minimum: float):
        super().__init__(message, f"gamma={gamma}, required >= {minimum}")
        self.gamma = gamma
        self.minimum = minimum


class ContractViolationError(BaseAppException):
    """Exception raised when an operation is called outside its preconditions."""
    pass


class DomainError(BaseAppException):
    """Exception raised when a hydrodynamic state cannot be inverted."""

    def __init__(
        self,
        message: str,
        residual: Optional[float] = None,
        iterations: Optional[int] = None,
    ):
        super().__init__(message, f"residual={residual}, iterations={iterations}")
        self.residual = residual
        self.iterations = iterations


class DegenerateSpecError(BaseAppException):
    """Exception raised when theta or r vanish."""
    pass


class NoVarianceError(BaseAppException):
    """Exception raised when an ensemble is too small to estimate a covariance."""

    def __init__(self, message: str, replicas: int):
        super().__init__(message, f"replicas={replicas}")
        self.replicas = replicas


class UnsupportedPresetError(BaseAppException):
    """Exception raised when a formula needs a susceptibility proportional to identity."""

    def __init__(self, message: str, preset: Optional[str] = None):
        super().__init__(message, preset)
        self.preset = preset


class SolverError(BaseAppException):
    """Exception raised when an iterative solve misses its tolerance."""

    def __init__(
        self,
        message: str,
        residual: float,
        iterations: int,
        tolerance: Optional[float] = None,
    ):
        super().__init__(message, f"residual={residual:.3e}, iterations={iterations}")
        self.residual = residual
        self.iterations = iterations
        self.tolerance = tolerance


class AccuracyError(BaseAppException):
    """Exception raised when two quadrature paths disagree."""

    def __init__(self, message: str, radial: float, planar: float, lam: float):
        super().__init__(message, f"lambda={lam}, radial={radial}, planar={planar}")
        self.radial = radial
        self.planar = planar
        self.lam = lam


class UnreliableExponentError(BaseAppException):
    """Exception raised when an exponent fit is too poor to trust."""

    def __init__(self, message: str, residual: float, trace: List[Dict[str, Any]]):
        super().__init__(message, f"residual={residual:.3f}")
        self.residual = residual
        self.trace = trace


class UnknownOperatorError(BaseAppException):
    """Exception raised for an unknown dual operator tag."""
    pass


class ConfigValidationError(BaseAppException):
    """Exception raised when an experiment config breaks a module precondition."""

    def __init__(self, message: str, invariant: str):
        super().__init__(message, invariant)
        self.invariant = invariant


class PipelineError(BaseAppException):
    """Exception raised when a pipeline section fails; carries the module tag."""

    def __init__(self, message: str, module: str, cause: Optional[BaseException] = None):
        super().__init__(message, module)
        self.module = module
        self.cause = cause


class ExportError(BaseAppException):
    """Exception raised during export operations."""
    pass
