import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.config import get_settings
from app.core.exceptions import ConfigValidationError, InvalidGammaError
from app.schemas.model import ObservableSpec
from app.services.lattice_model import available_presets, load_model

PIPELINES = ("simulate", "greenkubo", "dual-check", "resolvent", "bound", "dispersion-kappa")

Pipeline = Literal["simulate", "greenkubo", "dual-check", "resolvent", "bound", "dispersion-kappa"]


def _settings_default(name: str):
    return lambda: getattr(get_settings(), name)


class ExperimentConfig(BaseModel):
    """One reproducible run: model, observable, grids, tolerances and outputs."""

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    # Model
    preset: str = Field(default_factory=_settings_default("preset"))
    lattice_side: int = Field(default_factory=_settings_default("lattice_side"), alias="L")
    gamma: float = Field(default_factory=_settings_default("gamma"))

    # Observable
    theta: List[float] = Field(default_factory=lambda: [1.0, 0.0], min_length=2, max_length=2)
    r: List[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0], min_length=3, max_length=3)

    # Monte Carlo
    seed: int = Field(default_factory=_settings_default("seed"))
    replicas: int = Field(default_factory=_settings_default("replicas"))
    horizon: float = Field(default=100.0, alias="T", description="Last sample time")
    per_octave: int = Field(default=4, ge=1, description="Sample times per doubling")
    workers: int = Field(default_factory=_settings_default("worker_threads"), ge=1)

    # Laplace and bound grids
    lambdas: List[float] = Field(
        default_factory=lambda: [1.0, 0.3, 0.1],
        description="Laplace parameters of the Green-Kubo estimate"
    )
    c1: float = Field(default_factory=_settings_default("bound_c1"), alias="C1")
    epsilon: float = Field(default_factory=_settings_default("bound_epsilon"))
    u_min: float = Field(default=1e-12)
    u_max: float = Field(default=1e-4)
    kappa_iterations: int = Field(default=6, ge=1)
    bound_lambdas: List[float] = Field(
        default_factory=lambda: [10.0 ** -k for k in range(6, 31, 2)],
        description="Decreasing lambda grid of the bound profile"
    )

    # Hierarchy
    resolvent_side: int = Field(default_factory=_settings_default("resolvent_side"))
    resolvent_lambdas: List[float] = Field(default_factory=lambda: [1.0, 0.1])
    degrees: List[int] = Field(default_factory=lambda: [2, 3])
    hardcore: bool = True
    collision: Literal["Lc1", "Qn"] = "Lc1"
    cg_tolerance: float = Field(default_factory=_settings_default("cg_tolerance"), gt=0)

    # Outputs
    output_dir: str = Field(default_factory=_settings_default("output_dir"))
    formats: List[Literal["csv", "json", "xlsx"]] = Field(default_factory=lambda: ["csv", "json"])
    pipelines: List[Pipeline] = Field(default_factory=list)

    @property
    def spec(self) -> ObservableSpec:
        return ObservableSpec(theta=self.theta, r=self.r)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        try:
            config = cls.model_validate(dict(data))
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(p) for p in first["loc"]) or "config"
            raise ConfigValidationError(f"Invalid value for '{field}': {first['msg']}", invariant=field)
        config.validate_preconditions()
        return config

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "ExperimentConfig":
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigValidationError(f"Config {path} is not a key-value mapping", invariant="format")
        return cls.from_mapping(data)

    def echo(self) -> Dict[str, Any]:
        """Every field with defaults filled in, under the config-file keys."""
        return self.model_dump(by_alias=True, mode="json")

    def validate_preconditions(self) -> None:
        """Check each requested pipeline's preconditions before any compute starts."""
        if self.preset not in available_presets():
            raise ConfigValidationError(
                f"Unknown preset '{self.preset}' (available: {', '.join(available_presets())})",
                invariant="known preset",
            )
        try:
            load_model(self.preset, self.gamma)
        except InvalidGammaError as e:
            raise ConfigValidationError(
                f"{e.message}; exchange rates gamma +- e.v/2 must be nonnegative",
                invariant="rate nonnegativity",
            )
        if self.lattice_side < 4:
            raise ConfigValidationError(f"Torus side must be >= 4, got {self.lattice_side}", invariant="torus size")

        requested = set(self.pipelines)
        needs_spec = requested & {"greenkubo", "resolvent", "bound"}
        if needs_spec and self.spec.is_degenerate:
            raise ConfigValidationError(
                "Observable vanishes when theta = 0 or r = 0", invariant="nondegenerate observable"
            )
        if requested & {"simulate", "greenkubo"}:
            if self.replicas < 2:
                raise ConfigValidationError(
                    f"Need at least 2 replicas, got {self.replicas}", invariant="replicas >= 2"
                )
            if self.horizon <= 0:
                raise ConfigValidationError(f"Horizon must be positive, got {self.horizon}", invariant="horizon > 0")
        if "greenkubo" in requested and any(lam <= 0 for lam in self.lambdas):
            raise ConfigValidationError("Laplace parameters must be positive", invariant="lambda > 0")
        if "bound" in requested:
            if any(not 0 < lam < 1 for lam in self.bound_lambdas):
                raise ConfigValidationError("Bound lambdas must lie in (0, 1)", invariant="0 < lambda < 1")
            if any(b >= a for a, b in zip(self.bound_lambdas, self.bound_lambdas[1:])):
                raise ConfigValidationError("Bound lambdas must decrease", invariant="decreasing lambda grid")
            if self.c1 < 0 or not 0 < self.epsilon <= math.pi:
                raise ConfigValidationError(
                    f"Need C1 >= 0 and 0 < epsilon <= pi, got {self.c1}, {self.epsilon}",
                    invariant="bound constants",
                )
        if "resolvent" in requested:
            if any(lam <= 0 for lam in self.resolvent_lambdas):
                raise ConfigValidationError("Resolvent lambdas must be positive", invariant="lambda > 0")
            if any(not 2 <= n <= 4 for n in self.degrees):
                raise ConfigValidationError(
                    f"Truncation degrees must lie in 2..4, got {self.degrees}", invariant="2 <= n <= 4"
                )
            if self.resolvent_side < 4:
                raise ConfigValidationError(
                    f"Resolvent torus side must be >= 4, got {self.resolvent_side}", invariant="torus size"
                )
        if "dispersion-kappa" in requested:
            if not 0 < self.u_min < self.u_max <= 1e-2:
                raise ConfigValidationError(
                    f"u grid must lie in (0, 1e-2], got [{self.u_min}, {self.u_max}]", invariant="u grid range"
                )
            if math.log10(self.u_max / self.u_min) < 8.0 - 1e-9:
                raise ConfigValidationError("u grid must span at least 8 decades", invariant="u grid span")


def load_experiment(source: Optional[Union[str, Path, Mapping[str, Any]]] = None, **overrides) -> ExperimentConfig:
    """Config from a YAML path or mapping, with keyword overrides applied on top."""
    if source is None:
        data: Dict[str, Any] = {}
    elif isinstance(source, Mapping):
        data = dict(source)
    else:
        with open(source, "r") as f:
            data = yaml.safe_load(f) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_mapping(data)
