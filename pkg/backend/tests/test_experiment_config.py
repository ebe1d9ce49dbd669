"""
Unit tests for experiment configs: defaults, aliases, YAML files and precondition checks.
"""
from pathlib import Path

import pytest

from app.config import get_settings
from app.core.exceptions import ConfigValidationError
from app.schemas.experiment import PIPELINES, ExperimentConfig, load_experiment

EXPERIMENTS_DIR = Path(__file__).parent.parent / "app" / "data" / "experiments"


# ============================================================
# DEFAULTS AND ALIASES
# ============================================================

class TestDefaults:
    """Tests for defaults drawn from settings and config-file aliases."""

    def test_defaults_from_settings(self):
        config = ExperimentConfig.from_mapping({})
        settings = get_settings()

        assert config.preset == settings.preset
        assert config.lattice_side == settings.lattice_side
        assert config.cg_tolerance == settings.cg_tolerance
        assert config.pipelines == []

    def test_aliases(self):
        config = ExperimentConfig.from_mapping({"L": 8, "T": 12.5, "C1": 0.3})
        assert config.lattice_side == 8
        assert config.horizon == 12.5
        assert config.c1 == 0.3

    def test_echo_uses_aliases(self):
        echo = ExperimentConfig.from_mapping({"L": 8}).echo()
        assert echo["L"] == 8
        assert "lattice_side" not in echo
        assert echo["formats"] == ["csv", "json"]

    def test_spec_property(self):
        config = ExperimentConfig.from_mapping({"theta": [0.0, 1.0], "r": [0.0, 1.0, 0.0]})
        assert config.spec.theta == [0.0, 1.0]
        assert config.spec.r == [0.0, 1.0, 0.0]

    def test_pipeline_names(self):
        assert "dual-check" in PIPELINES
        assert len(PIPELINES) == 6


# ============================================================
# YAML TESTS
# ============================================================

class TestYamlConfigs:
    """Tests for the bundled experiment files."""

    @pytest.mark.parametrize("name", [
        "reference_spec.yaml",
        "greenkubo_cube.yaml",
        "interleaving.yaml",
        "bound_scaling.yaml",
        "dual_check_axes.yaml",
    ])
    def test_bundled_configs_load(self, name):
        config = ExperimentConfig.from_yaml(EXPERIMENTS_DIR / name)
        assert config.pipelines

    def test_reference_observable(self):
        config = ExperimentConfig.from_yaml(EXPERIMENTS_DIR / "reference_spec.yaml")
        assert config.preset == "axes"
        assert config.lattice_side == 32
        assert config.horizon == 100.0

    def test_cube_greenkubo_run(self):
        config = ExperimentConfig.from_yaml(EXPERIMENTS_DIR / "greenkubo_cube.yaml")
        assert config.preset == "cube"
        assert config.pipelines == ["greenkubo"]
        assert (config.lattice_side, config.replicas, config.horizon) == (32, 256, 100.0)

    def test_interleaving_run(self):
        config = ExperimentConfig.from_yaml(EXPERIMENTS_DIR / "interleaving.yaml")
        assert config.pipelines == ["resolvent"]
        assert config.resolvent_side == 6
        assert config.resolvent_lambdas == [1.0, 0.1]
        assert config.degrees == [2, 3, 4]

    def test_overrides_win(self):
        config = load_experiment(EXPERIMENTS_DIR / "dual_check_axes.yaml", preset="cube", seed=None)
        assert config.preset == "cube"
        assert config.seed == get_settings().seed

    def test_non_mapping_file(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigValidationError) as exc_info:
            ExperimentConfig.from_yaml(path)

        assert exc_info.value.invariant == "format"


# ============================================================
# PRECONDITION TESTS
# ============================================================

class TestPreconditions:
    """Tests that each pipeline's preconditions are checked before compute."""

    def assert_invariant(self, data, invariant):
        with pytest.raises(ConfigValidationError) as exc_info:
            ExperimentConfig.from_mapping(data)
        assert exc_info.value.invariant == invariant

    def test_negative_rates(self):
        self.assert_invariant({"preset": "cube", "gamma": 0.1}, "rate nonnegativity")

    def test_unknown_preset(self):
        self.assert_invariant({"preset": "hexagon"}, "known preset")

    def test_small_torus(self):
        self.assert_invariant({"L": 3}, "torus size")

    def test_unknown_key(self):
        self.assert_invariant({"lattice": 8}, "lattice")

    def test_unknown_pipeline(self):
        with pytest.raises(ConfigValidationError):
            ExperimentConfig.from_mapping({"pipelines": ["everything"]})

    def test_degenerate_observable(self):
        self.assert_invariant(
            {"theta": [0.0, 0.0], "pipelines": ["greenkubo"]}, "nondegenerate observable"
        )

    def test_degenerate_observable_fine_for_dual_check(self):
        config = ExperimentConfig.from_mapping({"theta": [0.0, 0.0], "pipelines": ["dual-check"]})
        assert config.spec.is_degenerate

    def test_single_replica(self):
        self.assert_invariant({"replicas": 1, "pipelines": ["simulate"]}, "replicas >= 2")

    def test_bound_grid_must_decrease(self):
        self.assert_invariant(
            {"bound_lambdas": [1e-8, 1e-6], "pipelines": ["bound"]}, "decreasing lambda grid"
        )

    def test_bound_window(self):
        self.assert_invariant({"epsilon": 4.0, "pipelines": ["bound"]}, "bound constants")

    def test_resolvent_degrees(self):
        self.assert_invariant({"degrees": [2, 5], "pipelines": ["resolvent"]}, "2 <= n <= 4")

    def test_u_grid_span(self):
        self.assert_invariant(
            {"u_min": 1e-8, "u_max": 1e-4, "pipelines": ["dispersion-kappa"]}, "u grid span"
        )
