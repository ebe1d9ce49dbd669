import hashlib
import json
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app.schemas.model import ObservableSpec


class CorrelationSeries(BaseModel):
    """Ensemble estimate of C(t) = <<sigma, e^{tL} sigma>> on a torus."""
    times: List[float] = Field(..., description="Sample times, strictly increasing from 0")
    values: List[float] = Field(..., description="C(t) estimates")
    stderr: List[float] = Field(..., description="Per-point standard errors")
    replicas: int = Field(..., ge=2)
    spec: ObservableSpec
    side: int = Field(default=0, ge=0, description="Torus side L (0 for synthetic series)")
    preset: str = "cube"
    exact_zero: Optional[float] = Field(
        default=None,
        description="Exactly computed <<sigma, sigma>> for the t = 0 check"
    )

    @model_validator(mode="after")
    def _check_grid(self) -> "CorrelationSeries":
        if not (len(self.times) == len(self.values) == len(self.stderr)):
            raise ValueError("times, values and stderr must have equal length")
        if not self.times or self.times[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("time grid must be strictly increasing")
        if any(s <= 0 for s in self.stderr):
            raise ValueError("standard errors must be positive")
        return self


class DiffusivityCurve(BaseModel):
    """D_{theta,r}(t) with the additive gamma |theta|^2 |r|^2 term recorded separately."""
    times: List[float]
    values: List[float]
    stderr: List[float] = Field(default_factory=list)
    constant: float = Field(..., description="gamma |theta|^2 |r|^2")
    kappa: float = Field(..., gt=0, description="Susceptibility scale chi = kappa I")
    method: str = Field(default="double_integral", description="double_integral or displacement")
    drift_correction: float = Field(default=0.0, description="Contracted V term")


class LaplaceEstimate(BaseModel):
    """Quadrature estimate of int_0^inf e^{-lambda t} C(t) dt."""
    lam: float = Field(..., gt=0)
    value: float
    stderr: float = 0.0
    body: float = Field(..., description="Quadrature over the sampled window")
    tail: float = Field(..., description="a E_1(lambda T) from the a/t tail fit")
    tail_amplitude: float = 0.0
    heuristic_tail: bool = True
    warnings: List[str] = Field(default_factory=list)


class CheckResult(BaseModel):
    """Outcome of one named identity or tolerance check."""
    name: str
    passed: bool
    value: Optional[float] = None
    expected: Optional[float] = None
    tolerance: Optional[float] = None
    detail: str = ""


class PipelineOutcome(BaseModel):
    """Status of one pipeline inside a run."""
    name: str
    status: str = Field(..., description="ok or failed")
    artifacts: List[str] = Field(default_factory=list)
    error: Optional[str] = None
    summary: Dict[str, Any] = Field(default_factory=dict)


class RunReport(BaseModel):
    """Everything needed to reproduce and audit a run."""
    config: Dict[str, Any]
    package_version: str
    preset: str
    seed: int
    pipelines: List[PipelineOutcome] = Field(default_factory=list)
    checks: List[CheckResult] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)
    timings: Dict[str, float] = Field(default_factory=dict, description="Wall-clock seconds per pipeline")
    content_hash: str = Field(default="", description="SHA-256 of the config echo and package version")

    @field_validator("warnings")
    @classmethod
    def _dedupe(cls, value: List[str]) -> List[str]:
        return list(dict.fromkeys(value))

    def compute_hash(self) -> str:
        """SHA-256 over the inputs: config echo and package version."""
        payload = {"config": self.config, "package_version": self.package_version}
        text = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def sealed(self) -> "RunReport":
        return self.model_copy(update={"content_hash": self.compute_hash()})

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and all(p.status == "ok" for p in self.pipelines)


class ResolventResult(BaseModel):
    """Truncated resolvent <<sigma, T_n sigma>> on a finite torus."""
    lam: float = Field(..., gt=0)
    n: int = Field(..., ge=2, description="Truncation degree")
    value: float
    hardcore: bool = True
    collision: str = Field(default="Lc1", description="Lc1 or Qn")
    side: int
    preset: str
    method: str = Field(default="schur", description="schur or coupled")
    iterations: int = 0
    sigma_norm: float = Field(default=0.0, description="<<sigma, sigma>>")
    class_counts: Dict[str, int] = Field(default_factory=dict)


class BoundFit(BaseModel):
    """Two-parameter fit B(lambda) ~ a + b g(lambda)."""
    law: str = Field(..., description="loglog or log")
    intercept: float
    slope: float
    relative_residual: float = Field(..., description="RMS residual over the range of B")


class BoundProfile(BaseModel):
    """Degree-3 lower-bound integral over a decreasing lambda grid."""
    lambdas: List[float]
    values: List[float]
    c0: float = Field(..., description="Spec constant from the projected sigma transform")
    c1: float = Field(..., ge=0)
    epsilon: float = Field(..., gt=0)
    fits: List[BoundFit] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_profile(self) -> "BoundProfile":
        if len(self.lambdas) != len(self.values):
            raise ValueError("lambdas and values must have equal length")
        if any(b >= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError("lambda grid must be decreasing")
        if any(v <= 0 for v in self.values):
            raise ValueError("bound values must be positive")
        return self

    def fit(self, law: str) -> Optional[BoundFit]:
        return next((f for f in self.fits if f.law == law), None)


class KappaIteration(BaseModel):
    """One step of the dispersion exponent map."""
    kappa_in: float
    fitted_exponent: float
    kappa_out: float
    residual: float
    cesaro: float = Field(..., description="(kappa_in + kappa_out) / 2")


class KappaTrace(BaseModel):
    """Iterates of the self-consistent dispersion exponent."""
    iterations: List[KappaIteration] = Field(default_factory=list)
    kappa: float = Field(..., description="Cesaro-averaged fixed point")
    exact_fixed_point: float = 0.5
    u_min: float
    u_max: float
    epsilon: float
