import math
from typing import List

from pydantic import BaseModel, Field, field_validator


class ChemicalPotential(BaseModel):
    """Chemical potential (lambda_0, lambda_1, lambda_2) of a product measure."""
    lam: List[float] = Field(
        default_factory=lambda: [0.0, 0.0, 0.0],
        min_length=3,
        max_length=3,
        description="Dimensionless (lambda_0, lambda_1, lambda_2)"
    )

    @field_validator("lam")
    @classmethod
    def _finite(cls, value: List[float]) -> List[float]:
        if not all(math.isfinite(x) for x in value):
            raise ValueError("chemical potential entries must be finite")
        return [float(x) for x in value]


class HydroState(BaseModel):
    """Density and momentum density of a product measure."""
    rho: float = Field(..., description="Particles per site")
    u: List[float] = Field(
        default_factory=lambda: [0.0, 0.0],
        min_length=2,
        max_length=2,
        description="Momentum density per site"
    )


class ObservableSpec(BaseModel):
    """Direction theta and conserved-field weights r of the contracted current.

    Zero vectors are accepted here; operations that need a nondegenerate
    observable reject them.
    """
    theta: List[float] = Field(
        default_factory=lambda: [1.0, 0.0],
        min_length=2,
        max_length=2,
        description="Direction theta in R^2"
    )
    r: List[float] = Field(
        default_factory=lambda: [1.0, 0.0, 0.0],
        min_length=3,
        max_length=3,
        description="Weights (r_0, r_1, r_2) on mass and momentum currents"
    )

    @property
    def is_degenerate(self) -> bool:
        return not any(self.theta) or not any(self.r)

    @property
    def theta_norm_sq(self) -> float:
        return sum(t * t for t in self.theta)

    @property
    def r_norm_sq(self) -> float:
        return sum(x * x for x in self.r)
