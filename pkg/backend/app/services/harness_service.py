"""
Harness Service

Runs the pipelines an ExperimentConfig requests, writes their artifacts and
collects named acceptance checks into a RunReport.

Pipelines and the module each one exercises:

    simulate          kmc            density/momentum curves, conservation
    greenkubo         greenkubo      C(t), D(t), Laplace estimates
    dual-check        dual_algebra   exact identity suite on a small torus
    resolvent         dual_algebra   truncated resolvents and their interleaving
    bound             spectral_bound degree-3 bound profile and its scaling law
    dispersion-kappa  spectral_bound self-consistent dispersion exponent

Usage
-----
    config = load_experiment("app/data/experiments/dual_check_axes.yaml")
    report = run_experiment(config)
    print(emit_report(report, "text"))
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from app import __version__
from app.config import get_settings
from app.core.exceptions import BaseAppException, PipelineError, UnsupportedPresetError
from app.schemas.experiment import ExperimentConfig
from app.schemas.results import CheckResult, PipelineOutcome, RunReport
from app.services.dual_algebra import (
    apply_dual,
    brute_force_inner,
    collision_intertwining_gap,
    dual_inner_product,
    exchange_intertwining_gap,
    parseval_inner,
    single_site_collision_spectrum,
    transform,
)
from app.services.export_service import ExportService, export_tables
from app.services.greenkubo_service import (
    ZERO_LAMBDA,
    correlation_from_ensemble,
    correlation_rows,
    diffusivity_curve,
    displacement_diffusivity,
    exact_sigma_norm,
    geometric_times,
    laplace_estimate,
    laplace_rows,
    simulate_current_ensemble,
)
from app.services.hierarchy_service import get_hierarchy_service
from app.services.kmc_service import run_ensemble
from app.services.lattice_model import Torus, VelocityModel, load_model
from app.services.local_functions import (
    LocalFunction,
    apply_collision,
    apply_exchange,
    apply_generator,
    random_local_function,
)
from app.services.equilibrium_service import sigma_observable
from app.services.rng_streams import make_generator
from app.services.spectral_bound_service import (
    bound_profile,
    bound_rows,
    default_u_grid,
    dispersion_fixed_point,
)

logger = logging.getLogger(__name__)

EXACT_TOLERANCE = 1e-12
PIPELINE_MODULES = {
    "simulate": "kmc",
    "greenkubo": "greenkubo",
    "dual-check": "dual_algebra",
    "resolvent": "dual_algebra",
    "bound": "spectral_bound",
    "dispersion-kappa": "spectral_bound",
}
EXACT_SUITE_STREAM = 2


@dataclass
class SectionResult:
    """What one pipeline hands back to the orchestrator."""
    summary: Dict[str, Any] = field(default_factory=dict)
    checks: List[CheckResult] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _check(name: str, value: float, expected: float, tolerance: float, detail: str = "") -> CheckResult:
    return CheckResult(
        name=name,
        passed=bool(abs(value - expected) <= tolerance),
        value=float(value),
        expected=float(expected),
        tolerance=float(tolerance),
        detail=detail,
    )


def _condition(name: str, passed: bool, value: Optional[float] = None, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), value=value, detail=detail)


# ============================================================
# Exact identity suite
# ============================================================

def exact_suite(
    model: VelocityModel,
    side: int = 4,
    samples: int = 20,
    seed: int = 0,
    tolerance: float = EXACT_TOLERANCE,
) -> List[CheckResult]:
    """Structural identities on a small torus over ``samples`` random local functions."""
    torus = Torus(side)
    rng = make_generator(seed, 0, EXACT_SUITE_STREAM)
    pairs = [
        (random_local_function(model, torus, rng), random_local_function(model, torus, rng))
        for _ in range(samples)
    ]
    prefix = f"{model.name} L={side}"

    def worst(values: Sequence[float]) -> float:
        return max((abs(v) for v in values), default=0.0)

    checks = [
        _check(f"{prefix}: stationarity <Lf> = 0",
               worst([apply_generator(f).expectation() for f, _ in pairs]), 0.0, tolerance),
        _check(f"{prefix}: collision generator symmetry",
               worst([g.inner(apply_collision(f)) - apply_collision(g).inner(f) for f, g in pairs]), 0.0, tolerance),
        _check(f"{prefix}: exchange adjoint under p*(e, v) = p(-e, v)",
               worst([g.inner(apply_exchange(f)) - apply_exchange(g, adjoint=True).inner(f) for f, g in pairs]),
               0.0, tolerance),
        _check(f"{prefix}: Parseval identity",
               worst([f.inner(g) - parseval_inner(transform(f), transform(g)) for f, g in pairs]), 0.0, tolerance),
        _check(f"{prefix}: exchange intertwining T L_ex = (S + J+ + J-) T",
               worst([exchange_intertwining_gap(f) for f, _ in pairs]), 0.0, tolerance),
        _check(f"{prefix}: collision intertwining T Lc1 = Lc1 T",
               worst([collision_intertwining_gap(f) for f, _ in pairs]), 0.0, tolerance),
    ]

    antisymmetry = []
    translated = []
    for f, g in pairs:
        tf, tg = transform(f), transform(g)
        jf = apply_dual("Jplus", tf) + apply_dual("Jminus", tf)
        jg = apply_dual("Jplus", tg) + apply_dual("Jminus", tg)
        antisymmetry.append(dual_inner_product(jf, tg) + dual_inner_product(tf, jg))
        translated.append(dual_inner_product(tf, tg) - brute_force_inner(f, g))
    checks.append(_check(f"{prefix}: antisymmetry of J+ + J-", worst(antisymmetry), 0.0, tolerance))
    checks.append(_check(f"{prefix}: <<f, g>> = sum_x Cov(tau_x f, g)", worst(translated), 0.0, tolerance))
    checks.extend(collision_checks(model, tolerance))
    return checks


def collision_checks(model: VelocityModel, tolerance: float = EXACT_TOLERANCE) -> List[CheckResult]:
    """Single-site collision spectrum checks."""
    spectrum = single_site_collision_spectrum(model)
    prefix = model.name
    quadruples = spectrum.quadruples
    checks = [
        _check(f"{prefix}: psi eigenvalue -4",
               max(abs(d.psi_eigenvalue + 4.0) for d in quadruples), 0.0, tolerance),
        _check(f"{prefix}: psi eigenfunction residual", max(d.psi_residual for d in quadruples), 0.0, tolerance),
        _condition(
            f"{prefix}: unique nonzero eigenvalue of L_q",
            all(
                sum(abs(x) > tolerance for x in d.eigenvalues) >= 1
                and all(abs(x) <= tolerance or abs(x + 4.0) <= tolerance for x in d.eigenvalues)
                for d in quadruples
            ),
        ),
        _check(f"{prefix}: degree-2 monomials annihilated",
               max(d.degree_two_residual for d in quadruples), 0.0, tolerance),
        _check(f"{prefix}: degree-4 monomials annihilated",
               max(d.degree_four_residual for d in quadruples), 0.0, tolerance),
        _check(f"{prefix}: degree-1 identity", max(d.degree_one_residual for d in quadruples), 0.0, tolerance),
        _check(f"{prefix}: degree-3 identity", max(d.degree_three_residual for d in quadruples), 0.0, tolerance),
        _condition(f"{prefix}: -L_q <= -2 L_q1 - 2 L_q3",
                   min(d.comparison_gap for d in quadruples) >= -1e-10,
                   value=min(d.comparison_gap for d in quadruples)),
        _check(f"{prefix}: kernel dimension of Q", spectrum.kernel_dimension, 3, 0),
        _check(f"{prefix}: Q annihilates conserved quantities", spectrum.conserved_residual, 0.0, tolerance),
        _condition(f"{prefix}: Q negative semidefinite", spectrum.is_negative_semidefinite,
                   value=float(spectrum.eigenvalues.max())),
    ]
    return checks


# ============================================================
# Pipelines
# ============================================================

def _site_sum(model: VelocityModel, torus: Torus, weights: Sequence[float]) -> LocalFunction:
    total = LocalFunction.constant(model, torus, 0.0)
    for v, weight in enumerate(weights):
        if weight:
            total = total + LocalFunction.occupation(model, torus, (0, 0), v).scale(float(weight))
    return total


def run_simulate(config: ExperimentConfig, exporter: ExportService) -> SectionResult:
    model = load_model(config.preset, config.gamma)
    torus = Torus(config.lattice_side)
    times = geometric_times(config.horizon, config.per_octave)
    velocities = model.velocity_array
    observables = {
        "mass": _site_sum(model, torus, [1.0] * model.n_velocities),
        "momentum_1": _site_sum(model, torus, velocities[:, 0]),
        "momentum_2": _site_sum(model, torus, velocities[:, 1]),
    }
    ensemble = run_ensemble(
        model, torus, ZERO_LAMBDA, times, config.seed, config.replicas,
        observables=observables, workers=config.workers,
    )
    # Field sums carry 1/L; density per site is the field sum over L
    density = ensemble.samples["mass"] / config.lattice_side
    mean = density.mean(axis=0)
    stderr = density.std(axis=0, ddof=1) / math.sqrt(ensemble.replicas)
    rows = list(zip(ensemble.times.tolist(), mean.tolist(), stderr.tolist()))
    export_tables(exporter, "simulate", {"density": ("density", rows)}, config.formats)

    target = model.n_velocities / 2.0
    drift = {name: float(np.abs(values - values[:, :1]).max()) for name, values in ensemble.samples.items()}
    checks = [
        _check("stationary density |V|/2", float(mean[-1]), target, 4.0 * float(stderr[-1]),
               "within 4 standard errors at the last sample"),
        _check("mass conservation", drift["mass"], 0.0, 1e-9),
        _check("momentum conservation", max(drift["momentum_1"], drift["momentum_2"]), 0.0, 1e-9),
    ]
    summary = {
        "events": int(ensemble.events.sum()),
        "density": float(mean[-1]),
        "density_stderr": float(stderr[-1]),
    }
    return SectionResult(summary=summary, checks=checks)


def _nondecreasing(values: Sequence[float], errors: Sequence[float]) -> bool:
    return all(
        b >= a - 4.0 * math.hypot(ea, eb)
        for a, b, ea, eb in zip(values, values[1:], errors, errors[1:])
    )


def run_greenkubo(config: ExperimentConfig, exporter: ExportService) -> SectionResult:
    model = load_model(config.preset, config.gamma)
    spec = config.spec
    times = geometric_times(config.horizon, config.per_octave)
    ensemble = simulate_current_ensemble(
        spec, model, config.lattice_side, times, config.replicas, config.seed, config.workers
    )
    series = correlation_from_ensemble(ensemble, spec, model, config.lattice_side)
    estimates = [laplace_estimate(series, lam) for lam in sorted(config.lambdas)]
    tables = {
        "correlation": ("correlation", correlation_rows(series)),
        "laplace": ("laplace", laplace_rows(estimates)),
    }
    result = SectionResult()
    for estimate in estimates:
        result.warnings.extend(estimate.warnings)

    exact = exact_sigma_norm(spec, model)
    result.checks.append(
        _check("C(0) = <<sigma, sigma>>", series.values[0], exact, 4.0 * series.stderr[0],
               "within 4 standard errors")
    )
    values = [e.value for e in estimates]
    result.checks.append(_condition("Laplace estimate positive", all(v > 0 for v in values), min(values)))
    result.checks.append(
        _condition("Laplace estimate decreasing in lambda", all(b < a for a, b in zip(values, values[1:])))
    )

    try:
        curve = diffusivity_curve(series, model.gamma, spec, model)
        displacement = displacement_diffusivity(ensemble, spec, model, config.lattice_side)
    except UnsupportedPresetError as e:
        result.warnings.append(f"diffusivity skipped: {e.message}")
        logger.warning(f"Diffusivity skipped for preset '{model.name}': {e.message}")
    else:
        tables["diffusivity"] = ("diffusivity", list(zip(curve.times, curve.values, curve.stderr)))
        tables["displacement"] = (
            "displacement", list(zip(displacement.times, displacement.values, displacement.stderr))
        )
        window = [i for i, t in enumerate(curve.times) if 1.0 <= t <= 100.0]
        result.checks.append(
            _condition(
                "D(t) nondecreasing on [1, 100]",
                _nondecreasing([curve.values[i] for i in window], [curve.stderr[i] for i in window]),
            )
        )
        result.summary.update({"D_final": curve.values[-1], "D_displacement_final": displacement.values[-1]})

    export_tables(
        exporter, "greenkubo", tables, config.formats,
        payload={
            "correlation": series.model_dump(mode="json"),
            "laplace": [e.model_dump(mode="json") for e in estimates],
        },
    )
    result.summary.update({"C0": series.values[0], "C0_stderr": series.stderr[0], "C0_exact": exact})
    return result


def run_dual_check(config: ExperimentConfig, exporter: ExportService) -> SectionResult:
    model = load_model(config.preset, config.gamma)
    side = get_settings().exact_check_side
    checks = exact_suite(model, side, seed=config.seed)
    sigma = transform(sigma_observable(config.spec, model, Torus(side))) if not config.spec.is_degenerate else None
    if sigma is not None:
        checks.append(
            _check(f"{model.name} L={side}: <<sigma, sigma>> by classes",
                   dual_inner_product(sigma, sigma), exact_sigma_norm(config.spec, model), EXACT_TOLERANCE)
        )
    rows = [(c.name, c.passed, c.value, c.expected, c.tolerance) for c in checks]
    export_tables(exporter, "dual_check", {"checks": ("checks", rows)}, config.formats,
                  payload=[c.model_dump() for c in checks])
    return SectionResult(summary={"checks": len(checks), "failed": sum(not c.passed for c in checks)}, checks=checks)


def run_resolvent(config: ExperimentConfig, exporter: ExportService) -> SectionResult:
    model = load_model(config.preset, config.gamma)
    torus = Torus(config.resolvent_side)
    service = get_hierarchy_service(model, torus, config.hardcore, config.collision)
    service.tolerance = config.cg_tolerance
    results = []
    result = SectionResult()
    for lam in config.resolvent_lambdas:
        values = {}
        for n in sorted(config.degrees):
            outcome = service.spec_resolvent(config.spec, lam, n)
            results.append(outcome)
            values[n] = outcome.value
        slack = 1e-9 * max(abs(v) for v in values.values())
        if 2 in values and 3 in values:
            result.checks.append(
                _condition(f"T_3 <= T_2 at lambda={lam}", values[3] <= values[2] + slack, values[2] - values[3])
            )
        if {2, 3, 4} <= set(values):
            result.checks.append(
                _condition(f"T_3 <= T_4 <= T_2 at lambda={lam}",
                           values[3] <= values[4] + slack and values[4] <= values[2] + slack)
            )
        result.summary[f"lambda={lam}"] = {str(n): v for n, v in values.items()}
    export_tables(exporter, "resolvent", {}, config.formats, payload=[r.model_dump() for r in results])
    return result


def run_bound(config: ExperimentConfig, exporter: ExportService) -> SectionResult:
    model = load_model(config.preset, config.gamma)
    profile = bound_profile(config.spec, model, config.bound_lambdas, config.c1, config.epsilon)
    control = bound_profile(config.spec, model, config.bound_lambdas, 0.0, config.epsilon)
    export_tables(
        exporter, "bound", {"profile": ("bound", bound_rows(profile, "loglog"))}, config.formats,
        payload={"profile": profile.model_dump(mode="json"), "control": control.model_dump(mode="json")},
    )
    loglog = profile.fit("loglog")
    control_log, control_loglog = control.fit("log"), control.fit("loglog")
    checks = [
        _condition("B fits a + b log log(1/lambda) within 5%", loglog.relative_residual < 0.05,
                   loglog.relative_residual),
        _condition("log log slope positive", loglog.slope > 0, loglog.slope),
        _condition("C1 = 0 control fits a log(1/lambda) law", control_log.relative_residual < 0.05
                   and control_log.relative_residual < control_loglog.relative_residual,
                   control_log.relative_residual),
    ]
    summary = {"c0": profile.c0, "slope": loglog.slope, "residual": loglog.relative_residual}
    return SectionResult(summary=summary, checks=checks)


def run_dispersion_kappa(config: ExperimentConfig, exporter: ExportService) -> SectionResult:
    trace = dispersion_fixed_point(
        config.kappa_iterations, default_u_grid(config.u_min, config.u_max), epsilon=config.epsilon
    )
    export_tables(exporter, "kappa", {}, config.formats, payload=trace)
    checks = [_check("dispersion exponent kappa = 1/2", trace.kappa, 0.5, 0.05, "Cesaro average of the iterates")]
    return SectionResult(summary={"kappa": trace.kappa}, checks=checks)


PIPELINE_RUNNERS: Dict[str, Callable[[ExperimentConfig, ExportService], SectionResult]] = {
    "simulate": run_simulate,
    "greenkubo": run_greenkubo,
    "dual-check": run_dual_check,
    "resolvent": run_resolvent,
    "bound": run_bound,
    "dispersion-kappa": run_dispersion_kappa,
}


# ============================================================
# Orchestration
# ============================================================

def run_experiment(config: ExperimentConfig, strict: bool = False, write_report: bool = True) -> RunReport:
    """Run every requested pipeline in order and return the sealed report.

    A failing pipeline is recorded with its module tag and the run continues;
    artifacts already written stay on disk. With ``strict`` the first failure
    is raised as a PipelineError once the report has been written.
    """
    config.validate_preconditions()
    exporter = ExportService(config.output_path)
    outcomes: List[PipelineOutcome] = []
    checks: List[CheckResult] = []
    warnings: List[str] = []
    timings: Dict[str, float] = {}
    first_error: Optional[PipelineError] = None

    for name in config.pipelines:
        module = PIPELINE_MODULES[name]
        logger.info(f"Pipeline '{name}' ({module}) starting")
        before = len(exporter.written)
        start = time.perf_counter()
        try:
            section = PIPELINE_RUNNERS[name](config, exporter)
        except Exception as e:
            message = e.message if isinstance(e, BaseAppException) else f"{type(e).__name__}: {e}"
            error = PipelineError(f"[{module}] {name} failed: {message}", module=module, cause=e)
            logger.error(f"{error.message} ({getattr(e, 'details', None)})")
            outcomes.append(PipelineOutcome(
                name=name, status="failed", artifacts=exporter.written[before:], error=error.message,
            ))
            first_error = first_error or error
        else:
            outcomes.append(PipelineOutcome(
                name=name, status="ok", artifacts=exporter.written[before:], summary=section.summary,
            ))
            checks.extend(section.checks)
            warnings.extend(section.warnings)
        timings[name] = round(time.perf_counter() - start, 3)

    report = RunReport(
        config=config.echo(),
        package_version=__version__,
        preset=config.preset,
        seed=config.seed,
        pipelines=outcomes,
        checks=checks,
        warnings=warnings,
        timings=timings,
    ).sealed()

    if write_report and config.pipelines:
        exporter.write_text("report.json", emit_report(report, "json"))
        exporter.write_text("report.txt", emit_report(report, "text"))
    logger.info(f"Run finished: {len(checks)} checks, {'pass' if report.passed else 'FAIL'}")
    if strict and first_error is not None:
        raise first_error
    return report


def emit_report(report: RunReport, fmt: str = "json") -> str:
    """Deterministic serialization; the text form ends with the acceptance table."""
    if fmt == "json":
        return json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"
    if fmt != "text":
        raise ValueError(f"Unknown report format '{fmt}'")

    lines = [
        f"Run report ({report.package_version})",
        f"preset: {report.preset}   seed: {report.seed}",
        f"content hash: {report.content_hash}",
        "",
        "Pipelines",
        "---------",
    ]
    for outcome in report.pipelines:
        line = f"  {outcome.name:<18} {outcome.status}"
        if outcome.error:
            line += f"  ({outcome.error})"
        lines.append(line)
    if not report.pipelines:
        lines.append("  (none)")

    lines += ["", "Acceptance checks", "-----------------"]
    lines.append(f"  {'status':<6} {'value':>14} {'expected':>14} {'tolerance':>11}  check")
    for check in report.checks:
        lines.append(
            f"  {'PASS' if check.passed else 'FAIL':<6} {_cell(check.value):>14} "
            f"{_cell(check.expected):>14} {_cell(check.tolerance):>11}  {check.name}"
        )
    if not report.checks:
        lines.append("  (none)")

    if report.warnings:
        lines += ["", "Warnings", "--------"] + [f"  {w}" for w in report.warnings]
    lines += ["", f"overall: {'PASS' if report.passed else 'FAIL'}", ""]
    return "\n".join(lines)


def _cell(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6g}"


def exit_code(report: RunReport) -> int:
    return 0 if report.passed else 1
