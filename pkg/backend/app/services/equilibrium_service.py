"""Product measures, susceptibility, fluxes and orthogonalized currents.

The invariant measures are product Bernoulli measures with
theta_v(lambda) = expit(lambda_0 + lambda_1 v.e1 + lambda_2 v.e2). Exact
checks run at lambda = 0, where every theta_v is 1/2 and xi = eta - 1/2.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from app.config import get_settings
from app.core.exceptions import ContractViolationError, DegenerateSpecError, DomainError
from app.schemas.model import ChemicalPotential, HydroState, ObservableSpec
from app.services.lattice_model import UNIT_VECTORS, Configuration, Torus, VelocityModel
from app.services.local_functions import LocalFunction
from app.services.rng_streams import SAMPLING_STREAM, make_generator

logger = logging.getLogger(__name__)

LambdaLike = Union[ChemicalPotential, Sequence[float]]


def _lam(lam: LambdaLike) -> np.ndarray:
    if isinstance(lam, ChemicalPotential):
        return np.array(lam.lam, dtype=np.float64)
    return np.asarray(lam, dtype=np.float64).reshape(3)


def theta_v(lam: LambdaLike, v: Sequence[int]) -> float:
    """Occupation probability of a velocity-v slot under the product measure."""
    lam = _lam(lam)
    return float(expit(lam[0] + lam[1] * v[0] + lam[2] * v[1]))


def theta_vector(lam: LambdaLike, model: VelocityModel) -> np.ndarray:
    return expit(_lam(lam) @ model.conserved_table)


def log_partition(lam: LambdaLike, model: VelocityModel) -> float:
    """Per-site log Z(lambda) = sum_v log(1 + exp(lambda . I(v)))."""
    return float(np.logaddexp(0.0, _lam(lam) @ model.conserved_table).sum())


def mean_state(lam: LambdaLike, model: VelocityModel) -> HydroState:
    """(rho, u) = gradient of log Z."""
    mean = model.conserved_table @ theta_vector(lam, model)
    return HydroState(rho=float(mean[0]), u=[float(mean[1]), float(mean[2])])


def _state_vector(state: HydroState) -> np.ndarray:
    return np.array([state.rho, state.u[0], state.u[1]], dtype=np.float64)


def susceptibility(lam: LambdaLike, model: VelocityModel) -> np.ndarray:
    """chi_{a,b} = sum_v I_a(v) I_b(v) theta_v (1 - theta_v)."""
    theta = theta_vector(lam, model)
    table = model.conserved_table.astype(np.float64)
    return (table * (theta * (1.0 - theta))) @ table.T


def sample_configuration(
    lam: LambdaLike,
    torus: Torus,
    seed: int,
    model: VelocityModel,
    replica: int = 0,
) -> Configuration:
    """Independent Bernoulli(theta_v) bits; deterministic given (seed, replica)."""
    theta = theta_vector(lam, model)
    rng = make_generator(seed, replica, SAMPLING_STREAM)
    draws = rng.random((torus.n_sites, model.n_velocities))
    return Configuration(model, torus, (draws < theta).astype(np.uint8))


def chemical_potential_from_state(
    state: HydroState,
    model: VelocityModel,
    tolerance: Optional[float] = None,
    max_iter: Optional[int] = None,
    initial: Optional[LambdaLike] = None,
) -> ChemicalPotential:
    """Invert lambda -> (rho, u) by damped Newton with the susceptibility as Jacobian."""
    settings = get_settings()
    if tolerance is None:
        tolerance = settings.newton_tolerance
    if max_iter is None:
        max_iter = settings.newton_max_iter
    damping = settings.newton_damping

    target = _state_vector(state)
    if not 0.0 < target[0] < model.n_velocities:
        raise DomainError(
            f"Density {target[0]} outside (0, {model.n_velocities})", residual=None, iterations=0
        )

    table = model.conserved_table.astype(np.float64)
    lam = np.zeros(3) if initial is None else _lam(initial).copy()
    residual = np.linalg.norm(table @ theta_vector(lam, model) - target)
    for iteration in range(1, max_iter + 1):
        if residual < tolerance:
            break
        gap = target - table @ theta_vector(lam, model)
        try:
            step = np.linalg.solve(susceptibility(lam, model), gap)
        except np.linalg.LinAlgError:
            raise DomainError("Singular susceptibility during Newton inversion", residual, iteration)
        scale = 1.0
        while True:
            trial = lam + scale * step
            trial_residual = np.linalg.norm(table @ theta_vector(trial, model) - target)
            # Halve on overshoot
            if trial_residual < residual or scale < 1e-8:
                break
            scale *= damping
        lam, residual = trial, trial_residual
        logger.debug(f"Newton iteration {iteration}: residual={residual:.3e}")
    if residual >= tolerance or not np.all(np.isfinite(lam)):
        raise DomainError(
            f"State (rho={state.rho}, u={state.u}) is not in the admissible set",
            residual=float(residual),
            iterations=max_iter,
        )
    return ChemicalPotential(lam=[float(x) for x in lam])


def _flux_weights(model: VelocityModel) -> np.ndarray:
    """w[a, j, v] = I_a(v) (e_j . v) for a = 0..2, j = 1..2."""
    velocities = model.velocity_array.astype(np.float64)
    table = model.conserved_table.astype(np.float64)
    return table[:, None, :] * velocities.T[None, :, :]


def flux_expectation(state: HydroState, model: VelocityModel) -> np.ndarray:
    """pi_{a,j} = sum_v I_a(v) (e_j . v) theta_v (theta_v - 1) at constant profiles."""
    lam = chemical_potential_from_state(state, model)
    return flux_from_lambda(lam, model)


def flux_from_lambda(lam: LambdaLike, model: VelocityModel) -> np.ndarray:
    theta = theta_vector(lam, model)
    return _flux_weights(model) @ (theta * (theta - 1.0))


def flux_jacobian(lam: LambdaLike, model: VelocityModel) -> np.ndarray:
    """d pi_{a,j} / d(rho, u_1, u_2), indexed [a, j, b]."""
    theta = theta_vector(lam, model)
    d_theta = theta * (1.0 - theta)
    # d/d lambda_b of theta (theta - 1) = (2 theta - 1) theta (1 - theta) I_b
    d_lambda = np.einsum(
        "ajv,v,bv->ajb",
        _flux_weights(model),
        (2.0 * theta - 1.0) * d_theta,
        model.conserved_table.astype(np.float64),
    )
    return d_lambda @ np.linalg.inv(susceptibility(lam, model))


def drift_correction(lam: LambdaLike, model: VelocityModel, spec: ObservableSpec) -> float:
    """Contracted V term: sum r_a theta_i V^{a,b}_{i,j} theta_j r_b."""
    gradient = flux_jacobian(lam, model)
    theta = np.array(spec.theta)
    r = np.array(spec.r)
    # 2V = grad pi_{a,i} . grad pi_{b,j} + grad pi_{b,i} . grad pi_{a,j}; both terms contract equally
    contracted = np.einsum("a,i,aib->b", r, theta, gradient)
    return float(contracted @ contracted)


# ============================================================
# Currents
# ============================================================

def _fraction_solve(matrix: List[List[Fraction]], rhs: List[Fraction]) -> List[Fraction]:
    """Gauss-Jordan solve in exact rationals."""
    n = len(rhs)
    rows = [list(matrix[i]) + [rhs[i]] for i in range(n)]
    for col in range(n):
        pivot = next(r for r in range(col, n) if rows[r][col] != 0)
        rows[col], rows[pivot] = rows[pivot], rows[col]
        head = rows[col][col]
        rows[col] = [x / head for x in rows[col]]
        for r in range(n):
            if r != col and rows[r][col] != 0:
                factor = rows[r][col]
                rows[r] = [a - factor * b for a, b in zip(rows[r], rows[col])]
    return [rows[i][n] for i in range(n)]


def exact_susceptibility(model: VelocityModel) -> List[List[Fraction]]:
    """chi at lambda = 0 in rationals: sum_v I_a I_b / 4."""
    table = model.conserved_table
    return [
        [Fraction(int(table[a] @ table[b]), 4) for b in range(3)]
        for a in range(3)
    ]


@dataclass
class OrthogonalizedCurrent:
    """Current omega^a_j, its orthogonalized part sigma^a_j and the projection coefficients."""
    a: int
    j: int
    current: LocalFunction
    sigma: LocalFunction
    closed_form: LocalFunction
    coefficients: Tuple[Fraction, Fraction, Fraction]
    quadratic: Dict[int, Fraction] = field(default_factory=dict)
    gradient: float = 0.0


def _pair_points(model: VelocityModel, j: int) -> List[Tuple[Tuple[int, int], int]]:
    e = UNIT_VECTORS[j - 1]
    return [((0, 0), v) for v in range(model.n_velocities)] + [
        (e, v) for v in range(model.n_velocities)
    ]


def _site_charge(model: VelocityModel, bits: Dict, site: Tuple[int, int], a: int) -> int:
    table = model.conserved_table
    return sum(int(table[a, v]) * bits[(site, v)] for v in range(model.n_velocities))


def orthogonalized_current(
    model: VelocityModel,
    a: int,
    j: int,
    torus: Optional[Torus] = None,
) -> OrthogonalizedCurrent:
    """sigma^a_j = omega^a_j minus its projection on the conserved fields, at lambda = 0."""
    if a not in (0, 1, 2) or j not in (1, 2):
        raise ContractViolationError(f"Current index out of range: a={a}, j={j}")
    torus = torus or Torus(get_settings().exact_check_side)
    e = UNIT_VECTORS[j - 1]
    gamma = model.gamma
    table = model.conserved_table
    velocities = model.velocities
    points = _pair_points(model, j)

    def omega(bits):
        value = gamma * (_site_charge(model, bits, e, a) - _site_charge(model, bits, (0, 0), a))
        for v, vel in enumerate(velocities):
            weight = int(table[a, v]) * (e[0] * vel[0] + e[1] * vel[1])
            lo, hi = bits[((0, 0), v)], bits[(e, v)]
            value += weight * (hi * lo - 0.5 * (hi + lo))
        return value

    def closed(bits):
        value = gamma * (_site_charge(model, bits, e, a) - _site_charge(model, bits, (0, 0), a))
        for v, vel in enumerate(velocities):
            weight = int(table[a, v]) * (e[0] * vel[0] + e[1] * vel[1])
            value += weight * (bits[(e, v)] - 0.5) * (bits[((0, 0), v)] - 0.5)
        return value

    current = LocalFunction.from_callable(model, torus, points, omega)
    closed_form = LocalFunction.from_callable(model, torus, points, closed)

    # <<omega, I_b>> = sum_x Cov(omega, I_b(eta_x)); only x in {0, e_j} overlap the support
    charges = [
        LocalFunction.from_callable(
            model, torus, [(x, v) for v in range(model.n_velocities)],
            lambda bits, x=x, b=b: _site_charge(model, bits, x, b),
        )
        for b in range(3)
        for x in ((0, 0), e)
    ]
    pairing = [
        Fraction(current.covariance(charges[2 * b])) + Fraction(current.covariance(charges[2 * b + 1]))
        for b in range(3)
    ]
    chi = exact_susceptibility(model)
    # c^{a,b} = sum_e <<omega, I_e>> (chi^-1)_{e,b}; chi is symmetric
    coefficients = tuple(_fraction_solve(chi, pairing))

    centered = current.values - current.expectation()
    sigma = LocalFunction(model, torus, current.bits, centered)
    for b, c in enumerate(coefficients):
        if c:
            charge = charges[2 * b]
            centered_charge = LocalFunction(model, torus, charge.bits, charge.values - charge.expectation())
            sigma = sigma - centered_charge.scale(float(c))

    quadratic = {
        v: Fraction(int(table[a, v]) * (e[0] * vel[0] + e[1] * vel[1]))
        for v, vel in enumerate(velocities)
    }
    return OrthogonalizedCurrent(
        a=a,
        j=j,
        current=current,
        sigma=sigma,
        closed_form=closed_form,
        coefficients=coefficients,
        quadratic=quadratic,
        gradient=gamma,
    )


def require_nondegenerate(spec: ObservableSpec) -> None:
    if spec.is_degenerate:
        raise DegenerateSpecError(
            "Observable vanishes identically when theta = 0 or r = 0",
            f"theta={spec.theta}, r={spec.r}",
        )


def sigma_pair_coefficients(spec: ObservableSpec, model: VelocityModel) -> Dict[Tuple[int, int], float]:
    """c_j(v) = theta_j {r_0 (e_j.v) + sum_a r_a (e_a.v)(e_j.v)}, keyed by (j, v) with j = 1, 2.

    These are the dual coefficients of sigma on the pair {(0, v), (e_j, v)}.
    """
    require_nondegenerate(spec)
    table = model.conserved_table
    coefficients = {}
    for j in (1, 2):
        for v, vel in enumerate(model.velocities):
            projection = vel[j - 1]
            weight = sum(spec.r[a] * float(table[a, v]) for a in range(3))
            coefficients[(j, v)] = spec.theta[j - 1] * weight * projection
    return coefficients


def sigma_observable(
    spec: ObservableSpec,
    model: VelocityModel,
    torus: Optional[Torus] = None,
    include_gradient: bool = False,
) -> LocalFunction:
    """sigma = sum_a sum_j r_a theta_j sigma^a_j as a truth table.

    The gradient pieces gamma {I_a(eta_{e_j}) - I_a(eta_0)} pair to zero in
    <<.,.>> and are dropped unless ``include_gradient`` is set.
    """
    coefficients = sigma_pair_coefficients(spec, model)
    torus = torus or Torus(get_settings().exact_check_side)
    sites = [(0, 0), UNIT_VECTORS[0], UNIT_VECTORS[1]]
    points = [(x, v) for x in sites for v in range(model.n_velocities)]
    table = model.conserved_table
    gamma = model.gamma

    def sigma(bits):
        value = 0.0
        for (j, v), c in coefficients.items():
            e = UNIT_VECTORS[j - 1]
            value += c * (bits[(e, v)] - 0.5) * (bits[((0, 0), v)] - 0.5)
        if include_gradient:
            for a in range(3):
                for j in (1, 2):
                    weight = spec.r[a] * spec.theta[j - 1]
                    if weight:
                        e = UNIT_VECTORS[j - 1]
                        value += weight * gamma * (
                            _site_charge(model, bits, e, a) - _site_charge(model, bits, (0, 0), a)
                        )
        return value

    return LocalFunction.from_callable(model, torus, points, sigma)


def susceptibility_rows(lam: LambdaLike, model: VelocityModel) -> List[Tuple[int, int, float]]:
    """(a, b, value) rows for CSV export."""
    chi = susceptibility(lam, model)
    return [(a, b, float(chi[a, b])) for a in range(3) for b in range(3)]


def flux_rows(lam: LambdaLike, model: VelocityModel) -> List[Tuple[int, int, float]]:
    """(a, j, value) rows for CSV export."""
    flux = flux_from_lambda(lam, model)
    return [(a, j + 1, float(flux[a, j])) for a in range(3) for j in range(2)]
