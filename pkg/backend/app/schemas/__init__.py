# Pydantic schemas
from app.schemas.model import ChemicalPotential, HydroState, ObservableSpec
from app.schemas.results import (
    BoundFit,
    BoundProfile,
    CheckResult,
    CorrelationSeries,
    DiffusivityCurve,
    KappaIteration,
    KappaTrace,
    LaplaceEstimate,
    PipelineOutcome,
    ResolventResult,
    RunReport,
)

__all__ = [
    "ChemicalPotential",
    "HydroState",
    "ObservableSpec",
    "BoundFit",
    "BoundProfile",
    "CheckResult",
    "CorrelationSeries",
    "DiffusivityCurve",
    "KappaIteration",
    "KappaTrace",
    "LaplaceEstimate",
    "PipelineOutcome",
    "ResolventResult",
    "RunReport",
]
