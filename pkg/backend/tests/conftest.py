"""
Pytest fixtures for backend testing.

Provides models, tori, observables and experiment-config factories.
"""
import sys
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

# Add backend to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.schemas.experiment import ExperimentConfig
from app.schemas.model import ObservableSpec
from app.services.lattice_model import Torus, VelocityModel, load_model


# ============================================================
# Model Fixtures
# ============================================================

@pytest.fixture
def axes_model() -> VelocityModel:
    """Axis velocities at gamma = 1."""
    return load_model("axes", 1.0)


@pytest.fixture
def cube_model() -> VelocityModel:
    """Diagonal velocities at gamma = 1 (identity susceptibility)."""
    return load_model("cube", 1.0)


@pytest.fixture(params=["axes", "cube"])
def any_model(request) -> VelocityModel:
    """Both presets."""
    return load_model(request.param, 1.0)


@pytest.fixture
def small_torus() -> Torus:
    """The 4 x 4 torus of the exact checks."""
    return Torus(4)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


# ============================================================
# Observable Fixtures
# ============================================================

@pytest.fixture
def mass_current_spec() -> ObservableSpec:
    """Mass current along e1."""
    return ObservableSpec(theta=[1.0, 0.0], r=[1.0, 0.0, 0.0])


@pytest.fixture
def degenerate_spec() -> ObservableSpec:
    return ObservableSpec(theta=[0.0, 0.0], r=[1.0, 0.0, 0.0])


# ============================================================
# Config Factories
# ============================================================

class ExperimentFactory:
    """Builds validated experiment configs writing into a temp directory."""

    def __init__(self, output_dir: Path):
        self.output_dir = output_dir

    def create(self, **kwargs) -> ExperimentConfig:
        data: Dict[str, Any] = {
            "preset": "axes",
            "L": 4,
            "gamma": 1.0,
            "seed": 7,
            "output_dir": str(self.output_dir),
            "pipelines": [],
        }
        data.update(kwargs)
        return ExperimentConfig.from_mapping(data)


@pytest.fixture
def experiment_factory(tmp_path) -> ExperimentFactory:
    return ExperimentFactory(tmp_path / "run")
