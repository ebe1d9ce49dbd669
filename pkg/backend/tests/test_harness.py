"""
Tests for the pipeline orchestrator, the run report and the CLI.
"""
import json
from pathlib import Path

import pytest

from app import cli
from app.core.exceptions import ContractViolationError, PipelineError
from app.schemas.results import CheckResult
from app.services import harness_service
from app.services.harness_service import (
    PIPELINE_RUNNERS,
    SectionResult,
    emit_report,
    exact_suite,
    exit_code,
    run_experiment,
)
from app.services.lattice_model import load_model


def failing_runner(config, exporter):
    raise ContractViolationError("lambda must be positive")


def failing_check_runner(config, exporter):
    return SectionResult(checks=[CheckResult(name="always fails", passed=False, value=1.0, expected=0.0)])


# ============================================================
# EXACT SUITE TESTS
# ============================================================

class TestExactSuite:
    """Tests for the structural identity checks."""

    @pytest.mark.parametrize("preset", ["axes", "cube"])
    def test_all_identities_hold(self, preset):
        checks = exact_suite(load_model(preset, 1.0), samples=6)

        failed = [c.name for c in checks if not c.passed]
        assert failed == []
        assert any("Parseval" in c.name for c in checks)
        assert any("kernel dimension" in c.name for c in checks)

    def test_deterministic_in_seed(self, axes_model):
        first = [c.value for c in exact_suite(axes_model, samples=3, seed=5)]
        second = [c.value for c in exact_suite(axes_model, samples=3, seed=5)]
        assert first == second


# ============================================================
# ORCHESTRATION TESTS
# ============================================================

class TestRunExperiment:
    """Tests for run_experiment and the report it seals."""

    def test_no_pipelines(self, experiment_factory):
        config = experiment_factory.create()
        report = run_experiment(config)

        assert report.passed
        assert exit_code(report) == 0
        assert report.pipelines == []
        assert not config.output_path.exists()

    def test_dual_check_writes_report(self, experiment_factory):
        config = experiment_factory.create(pipelines=["dual-check"])
        report = run_experiment(config)

        assert report.passed
        assert report.pipelines[0].status == "ok"
        assert report.pipelines[0].artifacts
        assert (config.output_path / "report.json").exists()
        assert (config.output_path / "report.txt").read_text().rstrip().endswith("overall: PASS")
        assert any("<<sigma, sigma>>" in c.name for c in report.checks)

    def test_hash_covers_inputs_only(self, experiment_factory):
        first = run_experiment(experiment_factory.create(pipelines=["dual-check"]), write_report=False)
        second = run_experiment(experiment_factory.create(pipelines=["dual-check"]), write_report=False)
        other = run_experiment(experiment_factory.create(pipelines=["dual-check"], seed=8), write_report=False)

        assert first.content_hash == second.content_hash
        assert first.content_hash != other.content_hash
        assert len(first.content_hash) == 64

    def test_failing_check_fails_run(self, experiment_factory, monkeypatch):
        monkeypatch.setitem(PIPELINE_RUNNERS, "bound", failing_check_runner)
        report = run_experiment(experiment_factory.create(pipelines=["bound"]))

        assert report.pipelines[0].status == "ok"
        assert not report.passed
        assert exit_code(report) == 1

    def test_pipeline_failure_is_tagged(self, experiment_factory, monkeypatch):
        monkeypatch.setitem(PIPELINE_RUNNERS, "dual-check", failing_runner)
        report = run_experiment(experiment_factory.create(pipelines=["dual-check", "dispersion-kappa"]))

        failed, kappa = report.pipelines
        assert failed.status == "failed"
        assert failed.error.startswith("[dual_algebra] dual-check failed")
        assert "lambda must be positive" in failed.error
        assert kappa.status == "ok"
        assert exit_code(report) == 1

    def test_strict_raises_after_report(self, experiment_factory, monkeypatch):
        monkeypatch.setitem(PIPELINE_RUNNERS, "dual-check", failing_runner)
        config = experiment_factory.create(pipelines=["dual-check"])

        with pytest.raises(PipelineError) as exc_info:
            run_experiment(config, strict=True)

        assert exc_info.value.module == "dual_algebra"
        assert isinstance(exc_info.value.cause, ContractViolationError)
        assert (config.output_path / "report.json").exists()

    def test_pipeline_modules_cover_runners(self):
        assert set(harness_service.PIPELINE_MODULES) == set(PIPELINE_RUNNERS)


# ============================================================
# PIPELINE TESTS
# ============================================================

def artifact_names(outcome):
    return sorted(Path(p).name for p in outcome.artifacts)


class TestPipelines:
    """Tests that each compute pipeline runs end to end on a small torus."""

    def test_simulate(self, experiment_factory):
        config = experiment_factory.create(pipelines=["simulate"], replicas=4, T=2.0)
        report = run_experiment(config)
        outcome = report.pipelines[0]
        checks = {c.name: c for c in report.checks}

        assert outcome.status == "ok"
        assert set(checks) == {"stationary density |V|/2", "mass conservation", "momentum conservation"}
        assert checks["mass conservation"].passed
        assert checks["momentum conservation"].passed
        assert artifact_names(outcome) == ["simulate_density.csv"]
        assert (config.output_path / "simulate_density.csv").exists()
        assert outcome.summary["events"] > 0

    def test_greenkubo_on_cube(self, experiment_factory):
        config = experiment_factory.create(pipelines=["greenkubo"], preset="cube", replicas=4, T=4.0)
        report = run_experiment(config)
        outcome = report.pipelines[0]

        assert outcome.status == "ok"
        assert [c.name for c in report.checks] == [
            "C(0) = <<sigma, sigma>>",
            "Laplace estimate positive",
            "Laplace estimate decreasing in lambda",
            "D(t) nondecreasing on [1, 100]",
        ]
        assert artifact_names(outcome) == [
            "greenkubo.json",
            "greenkubo_correlation.csv",
            "greenkubo_diffusivity.csv",
            "greenkubo_displacement.csv",
            "greenkubo_laplace.csv",
        ]
        assert not any(w.startswith("diffusivity skipped") for w in report.warnings)
        assert "D_final" in outcome.summary

    def test_greenkubo_on_axes_skips_diffusivity(self, experiment_factory):
        config = experiment_factory.create(pipelines=["greenkubo"], replicas=4, T=4.0)
        report = run_experiment(config)
        outcome = report.pipelines[0]

        assert outcome.status == "ok"
        assert "D(t) nondecreasing on [1, 100]" not in [c.name for c in report.checks]
        assert any(w.startswith("diffusivity skipped: ") for w in report.warnings)
        assert artifact_names(outcome) == [
            "greenkubo.json", "greenkubo_correlation.csv", "greenkubo_laplace.csv",
        ]

    def test_resolvent(self, experiment_factory):
        config = experiment_factory.create(pipelines=["resolvent"], resolvent_side=4, degrees=[2, 3])
        report = run_experiment(config)
        outcome = report.pipelines[0]

        assert outcome.status == "ok"
        assert [c.name for c in report.checks] == ["T_3 <= T_2 at lambda=1.0", "T_3 <= T_2 at lambda=0.1"]
        assert all(c.passed for c in report.checks)
        assert artifact_names(outcome) == ["resolvent.json"]
        rows = json.loads((config.output_path / "resolvent.json").read_text())
        assert [(r["lam"], r["n"]) for r in rows] == [(1.0, 2), (1.0, 3), (0.1, 2), (0.1, 3)]
        assert all(r["side"] == 4 for r in rows)


# ============================================================
# REPORT EMISSION TESTS
# ============================================================

class TestEmitReport:
    """Tests for the JSON and text report forms."""

    def test_json_is_deterministic(self, experiment_factory):
        report = run_experiment(experiment_factory.create(pipelines=["dispersion-kappa"]), write_report=False)

        text = emit_report(report, "json")
        assert text == emit_report(report, "json")
        data = json.loads(text)
        assert data["content_hash"] == report.content_hash
        assert data["config"]["L"] == 4

    def test_text_lists_checks(self, experiment_factory):
        report = run_experiment(experiment_factory.create(pipelines=["dispersion-kappa"]), write_report=False)
        text = emit_report(report, "text")

        assert "dispersion-kappa" in text
        assert "dispersion exponent kappa = 1/2" in text
        assert "Acceptance checks" in text

    def test_unknown_format(self, experiment_factory):
        report = run_experiment(experiment_factory.create(), write_report=False)
        with pytest.raises(ValueError):
            emit_report(report, "yaml")


# ============================================================
# CLI TESTS
# ============================================================

class TestCli:
    """Tests for argument parsing and exit codes."""

    def test_parse_lambda_list(self):
        assert cli.parse_lambdas("0.5,0.2") == [0.5, 0.2]

    def test_parse_geometric_range(self):
        assert cli.parse_lambdas("1e-2:1e-4:geometric") == pytest.approx([1e-2, 1e-3, 1e-4])

    def test_parse_bad_range(self):
        with pytest.raises(Exception):
            cli.parse_lambdas("1e-2:1e-4:linear")

    def test_parse_bool(self):
        assert cli.parse_bool("Yes") is True
        assert cli.parse_bool("off") is False

    def test_overrides_pin_pipeline(self):
        args = cli.build_parser().parse_args(["resolvent", "--L", "6", "--n", "2,3"])
        overrides = cli.overrides_from(args)
        assert overrides == {"L": 6, "degrees": [2, 3], "pipelines": ["resolvent"]}

    @pytest.mark.e2e
    def test_dual_check_exits_zero(self, tmp_path, capsys):
        code = cli.main(["dual-check", "--preset", "axes", "--L", "4", "--out", str(tmp_path)])

        assert code == 0
        assert "overall: PASS" in capsys.readouterr().out
        assert (tmp_path / "report.json").exists()

    def test_invalid_config_exits_two(self, tmp_path):
        code = cli.main(["dual-check", "--preset", "cube", "--gamma", "0.1", "--out", str(tmp_path)])
        assert code == 2
        assert not (tmp_path / "report.json").exists()

    def test_missing_config_file_exits_two(self, tmp_path):
        assert cli.main(["report", "--config", str(tmp_path / "missing.yaml")]) == 2
