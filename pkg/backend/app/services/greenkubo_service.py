"""Green-Kubo estimators from equilibrium ensembles.

Replicas start from the lambda = 0 product measure. For each replica the
normalized field sum of sigma is sampled on a time grid, together with the
integrated current J_{theta,r}(t). From these:

* C(t_k) is the ensemble covariance of the field sums at 0 and t_k,
* D(t) follows by double trapezoidal integration of C,
* the Laplace functional is a quadrature of e^{-lambda t} C(t) plus an a/t tail,
* an independent D(t) comes from Var J(t) / (2 t kappa L^2).

Usage
-----
    series = correlation_series(spec, model, 16, geometric_times(50.0), 32, seed=7)
    curve = diffusivity_curve(series, model.gamma, spec, model)
"""
import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, simpson, trapezoid
from scipy.special import exp1

from app.core.exceptions import ContractViolationError, NoVarianceError, UnsupportedPresetError
from app.schemas.model import ObservableSpec
from app.schemas.results import CorrelationSeries, DiffusivityCurve, LaplaceEstimate
from app.services.equilibrium_service import (
    drift_correction,
    require_nondegenerate,
    sigma_observable,
    sigma_pair_coefficients,
    susceptibility,
)
from app.services.kmc_service import EnsembleResult, FieldSum, run_ensemble
from app.services.lattice_model import Configuration, Torus, VelocityModel, load_model
from app.services.local_functions import LocalFunction

logger = logging.getLogger(__name__)

ZERO_LAMBDA = (0.0, 0.0, 0.0)

# lambda * T below this leaves the tail uncontrolled
TAIL_CONTROL = 5.0


def geometric_times(horizon: float, per_octave: int = 4, start_exponent: int = -8) -> List[float]:
    """0 followed by t_k = 2^{k/per_octave} up to ``horizon`` (included)."""
    times = [0.0]
    k = start_exponent
    while True:
        t = 2.0 ** (k / per_octave)
        if t >= horizon:
            break
        times.append(t)
        k += 1
    times.append(float(horizon))
    return times


def field_sum(config: Configuration, sigma: LocalFunction) -> float:
    """sum_x (tau_x sigma)(eta) / sqrt(L^2)."""
    return FieldSum(sigma)(config)


def exact_sigma_norm(spec: ObservableSpec, model: VelocityModel) -> float:
    """<<sigma, sigma>> at lambda = 0, i.e. (1/16) sum_{j,v} c_j(v)^2."""
    coefficients = sigma_pair_coefficients(spec, model)
    return sum(c * c for c in coefficients.values()) / 16.0


def kappa_of(model: VelocityModel) -> float:
    """kappa with chi = kappa I at lambda = 0."""
    chi = susceptibility(ZERO_LAMBDA, model)
    kappa = float(chi[0, 0])
    if not np.allclose(chi, kappa * np.eye(3)):
        raise UnsupportedPresetError(
            f"Susceptibility of preset '{model.name}' is not a multiple of the identity",
            preset=model.name,
        )
    return kappa


def simulate_current_ensemble(
    spec: ObservableSpec,
    model: VelocityModel,
    side: int,
    times: Sequence[float],
    replicas: int,
    seed: int,
    workers: Optional[int] = None,
) -> EnsembleResult:
    """Field sums of sigma and integrated currents for ``replicas`` equilibrium runs."""
    require_nondegenerate(spec)
    if replicas < 2:
        raise NoVarianceError(f"Need at least 2 replicas for a covariance, got {replicas}", replicas)
    times = [float(t) for t in times]
    if not times or times[0] != 0.0:
        raise ContractViolationError("Correlation grids must start at t = 0")
    torus = Torus(side)
    sigma = sigma_observable(spec, model, torus)
    return run_ensemble(
        model, torus, ZERO_LAMBDA, times, seed, replicas,
        observables={"sigma": sigma}, spec=spec, workers=workers,
    )


def correlation_from_ensemble(
    ensemble: EnsembleResult,
    spec: ObservableSpec,
    model: VelocityModel,
    side: int,
) -> CorrelationSeries:
    samples = ensemble.samples["sigma"]
    replicas = samples.shape[0]
    if replicas < 2:
        raise NoVarianceError(f"Need at least 2 replicas for a covariance, got {replicas}", replicas)
    centered = samples - samples.mean(axis=0)
    # Unbiased covariance with time 0 and its standard error
    products = centered[:, :1] * centered * (replicas / (replicas - 1.0))
    values = products.mean(axis=0)
    stderr = products.std(axis=0, ddof=1) / math.sqrt(replicas)
    if np.any(stderr <= 0):
        raise NoVarianceError("Field sums show no spread across replicas", replicas)
    return CorrelationSeries(
        times=ensemble.times.tolist(),
        values=values.tolist(),
        stderr=stderr.tolist(),
        replicas=replicas,
        spec=spec,
        side=side,
        preset=model.name,
        exact_zero=exact_sigma_norm(spec, model),
    )


def correlation_series(
    spec: ObservableSpec,
    model: VelocityModel,
    side: int,
    times: Sequence[float],
    replicas: int,
    seed: int,
    workers: Optional[int] = None,
) -> CorrelationSeries:
    """Estimate C(t) from ``replicas`` equilibrium trajectories on an L x L torus."""
    ensemble = simulate_current_ensemble(spec, model, side, times, replicas, seed, workers)
    series = correlation_from_ensemble(ensemble, spec, model, side)
    logger.info(
        f"C(0) = {series.values[0]:.5f} +- {series.stderr[0]:.5f} "
        f"(exact {series.exact_zero:.5f}, {replicas} replicas, L={side})"
    )
    return series


def _double_integral(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    inner = cumulative_trapezoid(values, times, initial=0.0)
    return cumulative_trapezoid(inner, times, initial=0.0)


def diffusivity_curve(
    series: CorrelationSeries,
    gamma: float,
    spec: ObservableSpec,
    model: Optional[VelocityModel] = None,
) -> DiffusivityCurve:
    """D(t) = gamma |theta|^2 |r|^2 + (1/(t kappa)) int_0^t ds int_0^s C(r) dr."""
    model = model or load_model(series.preset, gamma)
    kappa = kappa_of(model)
    times = np.asarray(series.times)
    constant = gamma * spec.theta_norm_sq * spec.r_norm_sq
    integral = _double_integral(np.asarray(series.values), times)
    # Errors treated as fully correlated across the grid
    error = _double_integral(np.asarray(series.stderr), times)
    values = np.full_like(times, constant)
    stderr = np.zeros_like(times)
    positive = times > 0
    values[positive] += integral[positive] / (times[positive] * kappa)
    stderr[positive] = error[positive] / (times[positive] * kappa)
    return DiffusivityCurve(
        times=times.tolist(),
        values=values.tolist(),
        stderr=stderr.tolist(),
        constant=constant,
        kappa=kappa,
        method="double_integral",
    )


def displacement_diffusivity(
    ensemble: EnsembleResult,
    spec: ObservableSpec,
    model: VelocityModel,
    side: int,
) -> DiffusivityCurve:
    """D(t) = (Var J(t) / L^2 - t^2 V) / (2 t kappa) from integrated currents."""
    if ensemble.currents is None:
        raise ContractViolationError("Ensemble was run without an integrated current")
    replicas = ensemble.currents.shape[0]
    if replicas < 2:
        raise NoVarianceError(f"Need at least 2 replicas for a variance, got {replicas}", replicas)
    kappa = kappa_of(model)
    drift = drift_correction(ZERO_LAMBDA, model, spec)
    times = ensemble.times
    volume = float(side * side)
    variance = ensemble.currents.var(axis=0, ddof=1) / volume
    centered = ensemble.currents - ensemble.currents.mean(axis=0)
    # Standard error of the sample variance from the fourth central moment
    fourth = (centered ** 4).mean(axis=0) / volume ** 2
    var_err = np.sqrt(np.maximum(fourth - variance ** 2, 0.0) / replicas)

    constant = model.gamma * spec.theta_norm_sq * spec.r_norm_sq
    values = np.full_like(times, constant)
    stderr = np.zeros_like(times)
    positive = times > 0
    t = times[positive]
    values[positive] = (variance[positive] - t * t * drift) / (2.0 * t * kappa)
    stderr[positive] = var_err[positive] / (2.0 * t * kappa)
    return DiffusivityCurve(
        times=times.tolist(),
        values=values.tolist(),
        stderr=stderr.tolist(),
        constant=constant,
        kappa=kappa,
        method="displacement",
        drift_correction=drift,
    )


def _tail_amplitude(times: np.ndarray, values: np.ndarray) -> float:
    """Least-squares a in C(t) ~ a / t over the last decade of the grid."""
    horizon = times[-1]
    window = (times >= horizon / 10.0) & (times > 0)
    if not np.any(window):
        return 0.0
    inverse = 1.0 / times[window]
    return float((values[window] @ inverse) / (inverse @ inverse))


def laplace_estimate(series: CorrelationSeries, lam: float) -> LaplaceEstimate:
    """int_0^inf e^{-lambda t} C(t) dt, estimating <<sigma, (lambda - L)^{-1} sigma>>."""
    if lam <= 0:
        raise ContractViolationError(f"Laplace parameter must be positive, got {lam}")
    times = np.asarray(series.times)
    values = np.asarray(series.values)
    kernel = np.exp(-lam * times)
    if times.size >= 3:
        body = float(simpson(kernel * values, x=times))
        stderr = float(simpson(kernel * np.asarray(series.stderr), x=times))
    else:
        body = float(trapezoid(kernel * values, x=times))
        stderr = float(trapezoid(kernel * np.asarray(series.stderr), x=times))
    horizon = float(times[-1])
    amplitude = _tail_amplitude(times, values)
    tail = amplitude * float(exp1(lam * horizon)) if horizon > 0 else 0.0

    warnings = ["tail extrapolation C(t) ~ a/t is heuristic"]
    if lam * horizon < TAIL_CONTROL:
        message = f"tail uncontrolled: lambda*T = {lam * horizon:.3g} < {TAIL_CONTROL}"
        warnings.append(message)
        logger.warning(f"Laplace estimate at lambda={lam}: {message}")
    return LaplaceEstimate(
        lam=lam,
        value=body + tail,
        stderr=stderr,
        body=body,
        tail=tail,
        tail_amplitude=amplitude,
        heuristic_tail=True,
        warnings=warnings,
    )


def correlation_rows(series: CorrelationSeries) -> List[tuple]:
    """(t, C, stderr) rows for CSV export."""
    return list(zip(series.times, series.values, series.stderr))


def laplace_rows(estimates: Sequence[LaplaceEstimate]) -> List[tuple]:
    """(lambda, laplace_est, stderr) rows for CSV export."""
    return [(e.lam, e.value, e.stderr) for e in estimates]
