"""Momentum-space evaluations: dispersion, transformed current and bound integrals.

Conventions
-----------
* W(p) = sum_k (1 - cos p_k) over the two axes, so 0 <= W <= 4.
* A pair function of relative displacement d has transform sum_d F(d) e^{i p.d}.
* The degree-2 inner product carries 1 / (2! 4^2) = 1/32 and momentum
  averages are (2 pi)^-2 int dp, or 1/N^2 sum_p on an N x N grid.

Usage
-----
    grid = MomentumGrid(6)
    value = degree2_resolvent_fourier(spec, 0.1, grid, model)
    profile = bound_profile(spec, model, geometric_lambdas(1e-6, 1e-30, 13))
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize, stats

from app.config import get_settings
from app.core.exceptions import (
    AccuracyError,
    ContractViolationError,
    UnreliableExponentError,
)
from app.schemas.model import ObservableSpec
from app.schemas.results import BoundFit, BoundProfile, KappaIteration, KappaTrace
from app.services.dual_algebra import collision_q_matrix, single_site_collision_spectrum
from app.services.equilibrium_service import sigma_pair_coefficients
from app.services.lattice_model import VelocityModel, load_model

logger = logging.getLogger(__name__)

# Radial and planar bound quadratures are compared down to this lambda
ACCURACY_FLOOR = 1e-4
ACCURACY_TOLERANCE = 0.05
EXPONENT_RESIDUAL_LIMIT = 0.10
INNER_RADIUS = 0.1


def dispersion(p) -> np.ndarray:
    """W(p) = sum_k (1 - cos p_k); accepts one point or an (..., 2) array."""
    p = np.asarray(p, dtype=np.float64)
    return (1.0 - np.cos(p)).sum(axis=-1)


@dataclass(frozen=True)
class MomentumGrid:
    """N x N periodic grid over [-pi, pi)^2 with equal weights (2 pi / N)^2."""
    n: int

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ContractViolationError(f"Momentum grids need an even N >= 2, got {self.n}")

    @cached_property
    def axis(self) -> np.ndarray:
        return -math.pi + 2.0 * math.pi * np.arange(self.n) / self.n

    @cached_property
    def points(self) -> np.ndarray:
        p1, p2 = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.column_stack([p1.ravel(), p2.ravel()])

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(self.n * self.n, (2.0 * math.pi / self.n) ** 2)

    def radial(self, radius: float, points: int = 64) -> Tuple[np.ndarray, np.ndarray]:
        """Gauss-Legendre nodes and weights on [0, radius] for isotropic integrands."""
        nodes, weights = np.polynomial.legendre.leggauss(points)
        return 0.5 * radius * (nodes + 1.0), 0.5 * radius * weights


# ============================================================
# Transformed current
# ============================================================

def _coefficient_table(spec: ObservableSpec, model: VelocityModel) -> np.ndarray:
    """c_j(v) as a (2, |V|) array."""
    coefficients = sigma_pair_coefficients(spec, model)
    table = np.zeros((2, model.n_velocities))
    for (j, v), c in coefficients.items():
        table[j - 1, v] = c
    return table


def sigma_fourier_diagonal(
    spec: ObservableSpec,
    model: VelocityModel,
    points: np.ndarray,
    symmetric: bool = False,
) -> np.ndarray:
    """sigma_hat(p; v, v) for each row of ``points``, shape (P, |V|).

    With ``symmetric`` the pair {(0, v), (e_j, v)} is transformed in its
    relative coordinate (factor 2 cos p_j); otherwise one point is pinned at
    the origin (factor 1 + e^{-i p_j}).
    """
    table = _coefficient_table(spec, model)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if symmetric:
        factors = 2.0 * np.cos(points)
    else:
        factors = 1.0 + np.exp(-1j * points)
    return factors @ table


def sigma_fourier(spec: ObservableSpec, model: VelocityModel, p=(0.0, 0.0), symmetric: bool = False) -> np.ndarray:
    """sigma_hat(p) as a |V| x |V| matrix; zero off the velocity diagonal."""
    return np.diag(sigma_fourier_diagonal(spec, model, np.asarray(p).reshape(1, 2), symmetric)[0])


def zero_mode_projection(spec: ObservableSpec, model: VelocityModel) -> np.ndarray:
    """sum_v sigma_hat(0; v, v) I_a(v) I_b(v), a, b in {0, 1, 2}; zero iff theta = 0 or r = 0."""
    diagonal = sigma_fourier_diagonal(spec, model, np.zeros((1, 2)))[0].real
    conserved = model.conserved_table.astype(np.float64)
    return (conserved * diagonal) @ conserved.T


def projected_sigma_norm(spec: ObservableSpec, model: VelocityModel, p=(0.0, 0.0)) -> float:
    """|| (pi_bar x pi_bar) O_2^* sigma_hat(p) || with pi_bar the kernel projector of Q."""
    spectrum = single_site_collision_spectrum(model)
    projector = spectrum.zero_projector
    matrix = sigma_fourier(spec, model, p)
    return float(np.linalg.norm(projector @ matrix @ projector))


def bound_constant(spec: ObservableSpec, model: VelocityModel) -> float:
    """c(spec) = ||pi_bar sigma_hat(0) pi_bar||^2 / (32 (2 pi)^2)."""
    return projected_sigma_norm(spec, model) ** 2 / (32.0 * (2.0 * math.pi) ** 2)


# ============================================================
# Degree-2 resolvent on a momentum grid
# ============================================================

def q2_matrix(model: VelocityModel) -> np.ndarray:
    """Q_2 = Q x I + I x Q on velocity pairs."""
    q_matrix = collision_q_matrix(model)
    identity = np.eye(model.n_velocities)
    return np.kron(q_matrix, identity) + np.kron(identity, q_matrix)


def _pair_vectors(diagonal: np.ndarray, n_velocities: int) -> np.ndarray:
    vectors = np.zeros((diagonal.shape[0], n_velocities * n_velocities), dtype=diagonal.dtype)
    for v in range(n_velocities):
        vectors[:, v * n_velocities + v] = diagonal[:, v]
    return vectors


def resolvent_block_floor(model: VelocityModel, grid: MomentumGrid, lam: float) -> float:
    """Smallest eigenvalue of (lambda + 4 gamma W(p)) I - Q_2 over the grid (>= lambda)."""
    q_eigenvalues = np.linalg.eigvalsh(q2_matrix(model))
    return float(lam + 4.0 * model.gamma * dispersion(grid.points).min() - q_eigenvalues.max())


def degree2_resolvent_fourier(
    spec: ObservableSpec,
    lam: float,
    grid: MomentumGrid,
    model: VelocityModel,
) -> float:
    """(1 / (32 N^2)) sum_p sigma_hat^* [(lambda + 4 gamma W(p)) I - Q_2]^{-1} sigma_hat."""
    if lam <= 0:
        raise ContractViolationError(f"Resolvent parameter must be positive, got {lam}")
    n_velocities = model.n_velocities
    eigenvalues, basis = np.linalg.eigh(q2_matrix(model))
    diagonal = sigma_fourier_diagonal(spec, model, grid.points, symmetric=True)
    coefficients = _pair_vectors(diagonal, n_velocities) @ basis
    denominators = lam + 4.0 * model.gamma * dispersion(grid.points)[:, None] - eigenvalues[None, :]
    if np.any(denominators <= 0):
        raise ContractViolationError("Degree-2 resolvent block is singular")
    per_point = (np.abs(coefficients) ** 2 / denominators).sum(axis=1)
    average = float(per_point @ grid.weights) / (2.0 * math.pi) ** 2
    return average / 32.0


# ============================================================
# Degree-3 lower bound
# ============================================================

def _radial_inner(log_lam: float, c1: float, radius: float) -> float:
    """2 pi int_0^radius r dr / (lambda + r^2 + c1 (r^2/2) |log(lambda + r^2/2)|).

    With t = log(lambda + r^2/2) - log(lambda) the integrand becomes
    1 / (2 - e^-t + c1 (1 - e^-t) |log(lambda) + t|), so only log(lambda) enters.
    """
    upper = math.log1p(radius * radius / 2.0 * math.exp(-log_lam)) if log_lam > -700 else (
        2.0 * math.log(radius) - math.log(2.0) - log_lam
    )

    def integrand(t):
        decay = -math.expm1(-t)
        return 1.0 / (1.0 + decay + c1 * decay * abs(log_lam + t))

    value, _ = integrate.quad(integrand, 0.0, upper, limit=400)
    return 2.0 * math.pi * value


def _bound_density(lam: float, c1: float):
    def density(w):
        total = lam + w
        return 1.0 / (lam + 2.0 * w + c1 * w * abs(math.log(total)))
    return density


def _planar(lam: float, c1: float, epsilon: float, r_min: float = 0.0) -> float:
    """int over [-eps, eps]^2 minus the disk of radius r_min, exact W, in polar coordinates."""
    density = _bound_density(lam, c1)
    scale = math.sqrt(lam)

    def along_ray(theta):
        r_max = epsilon / math.cos(theta)
        if r_max <= r_min:
            return 0.0
        c, s = math.cos(theta), math.sin(theta)

        def integrand(r):
            w = (1.0 - math.cos(r * c)) + (1.0 - math.cos(r * s))
            return r * density(w)

        points = [scale] if r_min < scale < r_max else None
        value, _ = integrate.quad(integrand, r_min, r_max, points=points, limit=400)
        return value

    # Eight reflections of the wedge 0 <= theta <= pi/4 tile the square
    value, _ = integrate.quad(along_ray, 0.0, math.pi / 4.0, limit=200)
    return 8.0 * value


def bound_integral(lam: float, c1: float, epsilon: float, check: bool = True) -> float:
    """int_{[-eps, eps)^2} dp / (lambda + 2W + c1 W |log(lambda + W)|).

    A disk of radius min(0.1, eps/2) is done radially with W ~ |p|^2/2; the
    rest of the square uses the exact W. At lambda >= 1e-4 the result is
    compared with a planar quadrature of the whole square.
    """
    if not 0.0 < lam < 1.0:
        raise ContractViolationError(f"Bound needs 0 < lambda < 1, got {lam}")
    if not 0.0 < epsilon <= math.pi:
        raise ContractViolationError(f"Integration window must be in (0, pi], got {epsilon}")
    if c1 < 0:
        raise ContractViolationError(f"C1 must be nonnegative, got {c1}")
    radius = min(INNER_RADIUS, epsilon / 2.0)
    radial = _radial_inner(math.log(lam), c1, radius) + _planar(lam, c1, epsilon, r_min=radius)
    if check and lam >= ACCURACY_FLOOR:
        planar = _planar(lam, c1, epsilon)
        gap = abs(radial - planar) / abs(planar)
        logger.debug(f"Bound quadratures at lambda={lam}: radial={radial:.8g}, planar={planar:.8g}")
        if gap > ACCURACY_TOLERANCE:
            raise AccuracyError(
                f"Radial and planar bound quadratures differ by {gap:.1%}",
                radial=radial,
                planar=planar,
                lam=lam,
            )
    return radial


def degree3_lower_bound(
    spec: ObservableSpec,
    lam: float,
    c1: Optional[float] = None,
    epsilon: Optional[float] = None,
    model: Optional[VelocityModel] = None,
) -> float:
    """c(spec) times the bound integral."""
    settings = get_settings()
    c1 = settings.bound_c1 if c1 is None else c1
    epsilon = settings.bound_epsilon if epsilon is None else epsilon
    if model is None:
        model = load_model(settings.preset, settings.gamma)
    return bound_constant(spec, model) * bound_integral(lam, c1, epsilon)


def geometric_lambdas(start: float, stop: float, count: int) -> List[float]:
    """Decreasing geometric grid from ``start`` to ``stop``."""
    if not (0 < stop < start < 1) or count < 2:
        raise ContractViolationError(f"Need 1 > start > stop > 0 and count >= 2, got {start}, {stop}, {count}")
    return [float(x) for x in np.geomspace(start, stop, count)]


def _fit(law: str, regressor: np.ndarray, values: np.ndarray) -> BoundFit:
    result = stats.linregress(regressor, values)
    predicted = result.intercept + result.slope * regressor
    spread = float(values.max() - values.min()) or 1.0
    residual = float(np.sqrt(np.mean((values - predicted) ** 2))) / spread
    return BoundFit(law=law, intercept=float(result.intercept), slope=float(result.slope), relative_residual=residual)


def bound_profile(
    spec: ObservableSpec,
    model: VelocityModel,
    lambdas: Sequence[float],
    c1: Optional[float] = None,
    epsilon: Optional[float] = None,
) -> BoundProfile:
    """B(lambda) over a decreasing grid, fitted against log log(1/lambda) and log(1/lambda)."""
    settings = get_settings()
    c1 = settings.bound_c1 if c1 is None else c1
    epsilon = settings.bound_epsilon if epsilon is None else epsilon
    constant = bound_constant(spec, model)
    values = np.array([constant * bound_integral(lam, c1, epsilon) for lam in lambdas])
    log_inverse = -np.log(np.asarray(lambdas, dtype=np.float64))
    fits = [_fit("loglog", np.log(log_inverse), values), _fit("log", log_inverse, values)]
    for f in fits:
        logger.info(f"Bound fit ({f.law}): slope={f.slope:.5g}, residual={f.relative_residual:.3%}")
    return BoundProfile(
        lambdas=[float(x) for x in lambdas],
        values=values.tolist(),
        c0=constant,
        c1=c1,
        epsilon=epsilon,
        fits=fits,
    )


def bound_rows(profile: BoundProfile, law: str = "loglog") -> List[tuple]:
    """(lambda, B, fit_residual) rows; the residual is per point against the chosen fit."""
    fit = profile.fit(law)
    rows = []
    for lam, value in zip(profile.lambdas, profile.values):
        x = math.log(-math.log(lam)) if law == "loglog" else -math.log(lam)
        residual = value - (fit.intercept + fit.slope * x) if fit else 0.0
        rows.append((lam, value, residual))
    return rows


# ============================================================
# Dispersion exponent fixed point
# ============================================================

def dispersion_integral(u: float, kappa: float, epsilon: float) -> float:
    """int_{|p| <= eps} dp / (u + W + (u + W) |log(u + W)|^kappa) with W ~ |p|^2/2.

    With s = log(u + W) this is 2 pi int ds / (1 + |s|^kappa).
    """
    lower = math.log(u)
    upper = math.log(u + epsilon * epsilon / 2.0)
    value, _ = integrate.quad(lambda s: 1.0 / (1.0 + abs(s) ** kappa), lower, upper, limit=400)
    return 2.0 * math.pi * value


def _exponent_model(ell, c, alpha):
    return c / (1.0 + ell ** alpha)


def fitted_exponent(kappa: float, u_grid: Sequence[float], epsilon: float) -> Tuple[float, float]:
    """Exponent alpha of dI/d log(1/u) ~ c / (1 + log(1/u)^alpha), with the relative residual.

    The fit only tests that the c / (1 + ell^alpha) form describes the integral.
    Its alpha tracks kappa, so the fixed point found by iterating kappa -> 1 - alpha
    is a property of that map and not independent evidence for the exponent.
    """
    u = np.sort(np.asarray(u_grid, dtype=np.float64))[::-1]
    ell = -np.log(u)
    values = np.array([dispersion_integral(x, kappa, epsilon) for x in u])
    slope = np.gradient(values, ell)
    (c, alpha), _ = optimize.curve_fit(
        _exponent_model, ell, slope, p0=(2.0 * math.pi, 0.5), bounds=([0.0, 0.0], [np.inf, 2.0])
    )
    predicted = _exponent_model(ell, c, alpha)
    residual = float(np.sqrt(np.mean((slope - predicted) ** 2) / np.mean(slope ** 2)))
    return float(alpha), residual


def default_u_grid(u_min: float = 1e-12, u_max: float = 1e-4, per_decade: int = 4) -> List[float]:
    decades = math.log10(u_max / u_min)
    return [float(x) for x in np.geomspace(u_min, u_max, int(round(decades * per_decade)) + 1)]


def dispersion_fixed_point(
    max_iter: int = 6,
    u_grid: Optional[Sequence[float]] = None,
    kappa0: float = 0.0,
    epsilon: Optional[float] = None,
) -> KappaTrace:
    """Iterate kappa -> 1 - (fitted exponent) and report Cesaro averages of the iterates."""
    u_grid = list(u_grid) if u_grid is not None else default_u_grid()
    epsilon = get_settings().bound_epsilon if epsilon is None else epsilon
    u_min, u_max = min(u_grid), max(u_grid)
    if u_min <= 0 or u_max > 1e-2:
        raise ContractViolationError(f"u grid must lie in (0, 1e-2], got [{u_min}, {u_max}]")
    if math.log10(u_max / u_min) < 8.0 - 1e-9:
        raise ContractViolationError("u grid must span at least 8 decades")
    if max_iter < 1:
        raise ContractViolationError(f"Need at least one iteration, got {max_iter}")

    kappa = kappa0
    iterations: List[KappaIteration] = []
    for step in range(max_iter):
        alpha, residual = fitted_exponent(kappa, u_grid, epsilon)
        updated = 1.0 - alpha
        iterations.append(
            KappaIteration(
                kappa_in=kappa,
                fitted_exponent=alpha,
                kappa_out=updated,
                residual=residual,
                cesaro=0.5 * (kappa + updated),
            )
        )
        logger.debug(f"kappa iteration {step}: {kappa:.4f} -> {updated:.4f} (residual {residual:.2%})")
        if residual > EXPONENT_RESIDUAL_LIMIT:
            raise UnreliableExponentError(
                f"Exponent fit residual {residual:.1%} exceeds {EXPONENT_RESIDUAL_LIMIT:.0%}",
                residual=residual,
                trace=[it.model_dump() for it in iterations],
            )
        kappa = updated

    averaged = float(np.mean([it.cesaro for it in iterations]))
    logger.info(f"Dispersion exponent: Cesaro average {averaged:.4f} after {max_iter} iterations")
    return KappaTrace(
        iterations=iterations,
        kappa=averaged,
        u_min=u_min,
        u_max=u_max,
        epsilon=epsilon,
    )
