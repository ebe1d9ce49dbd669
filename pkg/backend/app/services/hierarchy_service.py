"""
Hierarchy Service

Truncated resolvent <<sigma, (lambda - L_n)^{-1} sigma>> in the dual picture.

The generator restricted to degrees 2..n is block tridiagonal: diagonal blocks
lambda - S - Lc1, raising blocks J+ and lowering blocks J-. Degree one
decouples from sigma, so the levels start at 2. In the coordinates
u_hat = W^{1/2} u_bar (W the class weights) the diagonal blocks D_k are
symmetric positive definite and J- becomes -B_k^T with B_k = W^{1/2} J+ W^{-1/2}.

Two solvers give the same value:

* ``schur``: K_n = D_n, K_k = D_k + B_k^T K_{k+1}^{-1} B_k, value sigma^T K_2^{-1}
  sigma with nested conjugate gradients. Used up to n = 3.
* ``coupled``: the whole truncated system with rows signed by (-1)^k, which is
  symmetric indefinite, solved by MINRES. Used for n >= 4.

Usage
-----
    service = get_hierarchy_service(model, Torus(6))
    result = service.spec_resolvent(spec, lam=0.1, n=3)
    result = service.truncated_resolvent(sigma, lam=0.1, n=3)  # any degree-2 SetFunction
"""
import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, aslinearoperator, cg, minres

from app.config import get_settings
from app.core.exceptions import ContractViolationError, SolverError, UnknownOperatorError
from app.schemas.model import ObservableSpec
from app.schemas.results import ResolventResult
from app.services.class_space import ClassSpace, class_space
from app.services.dual_algebra import (
    COLLISION_VARIANTS,
    SetFunction,
    class_vector,
    from_class_vector,
    operator_matrix,
    to_class,
)
from app.services.equilibrium_service import sigma_pair_coefficients
from app.services.lattice_model import UNIT_VECTORS, Torus, VelocityModel

logger = logging.getLogger(__name__)

METHODS = ("auto", "schur", "coupled")
DEGREE_TOLERANCE = 1e-12  # relative size of an off-degree class value that still counts as zero


@dataclass
class Level:
    """Symmetrized operators of one degree."""
    degree: int
    space: ClassSpace
    root_weights: np.ndarray
    generator: sparse.csr_matrix  # W^{1/2} (-S - Lc1) W^{-1/2}
    raising: Optional[sparse.csr_matrix] = None  # B_k, degree k -> k + 1

    def shifted(self, lam: float) -> sparse.csr_matrix:
        return (self.generator + lam * sparse.identity(self.space.size, format="csr")).tocsr()


class _IterationCounter:
    def __init__(self):
        self.count = 0

    def __call__(self, _):
        self.count += 1


class HierarchyService:
    """Truncated resolvents on one torus for one space type and collision variant."""

    DEFAULT_MAX_DEGREE = 4
    SYMMETRY_TOLERANCE = 1e-10

    def __init__(
        self,
        model: VelocityModel,
        torus: Torus,
        hardcore: bool = True,
        collision: str = "Lc1",
        tolerance: Optional[float] = None,
        max_iter: Optional[int] = None,
    ):
        if collision not in COLLISION_VARIANTS:
            raise UnknownOperatorError(f"Unknown collision variant '{collision}'", ", ".join(COLLISION_VARIANTS))
        settings = get_settings()
        self.model = model
        self.torus = torus
        self.hardcore = hardcore
        self.collision = collision
        self.tolerance = tolerance if tolerance is not None else settings.cg_tolerance
        self.max_iter = max_iter if max_iter is not None else settings.cg_max_iter
        self._levels: Dict[int, Level] = {}
        self.last_iterations = 0

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def space(self, degree: int) -> ClassSpace:
        return class_space(self.model, self.torus, degree, self.hardcore)

    def level(self, degree: int) -> Level:
        """Symmetrized diagonal block of ``degree`` (built on first use)."""
        if degree not in self._levels:
            space = self.space(degree)
            root = np.sqrt(space.weights)
            matrix = operator_matrix("S", self.model, self.torus, degree, self.hardcore, self.collision)
            matrix = matrix + operator_matrix("Lc1", self.model, self.torus, degree, self.hardcore, self.collision)
            generator = (-sparse.diags(root) @ matrix @ sparse.diags(1.0 / root)).tocsr()
            self._check_symmetric(generator, f"degree-{degree} block")
            self._levels[degree] = Level(degree, space, root, generator)
        return self._levels[degree]

    def coupling(self, degree: int) -> sparse.csr_matrix:
        """B_k = W_{k+1}^{1/2} J+ W_k^{-1/2} from ``degree`` to ``degree + 1``."""
        lower = self.level(degree)
        if lower.raising is None:
            upper = self.level(degree + 1)
            raised = operator_matrix("Jplus", self.model, self.torus, degree, self.hardcore, self.collision)
            lower.raising = (
                sparse.diags(upper.root_weights) @ raised @ sparse.diags(1.0 / lower.root_weights)
            ).tocsr()
        return lower.raising

    def _check_symmetric(self, matrix: sparse.csr_matrix, label: str) -> None:
        if matrix.nnz == 0:
            return
        defect = abs(matrix - matrix.T).max()
        scale = abs(matrix).max()
        if defect > self.SYMMETRY_TOLERANCE * max(scale, 1.0):
            raise ContractViolationError(f"{label} is not self-adjoint: defect {defect:.3e}")

    def sigma_vector(self, spec: ObservableSpec) -> np.ndarray:
        """sigma_bar on degree-2 classes: c_j(v) on the class of {(0, v), (e_j, v)}."""
        space = self.space(2)
        n_velocities = self.model.n_velocities
        vector = np.zeros(space.size)
        for (j, v), c in sigma_pair_coefficients(spec, self.model).items():
            if c == 0.0:
                continue
            partner = self.torus.site_index(UNIT_VECTORS[j - 1]) * n_velocities + v
            index = space.index((v, partner))
            if index < 0:
                raise ContractViolationError(f"Pair class of velocity {v} along e_{j} is missing")
            vector[index] += c
        return vector

    def symmetrized(self, vector: np.ndarray, degree: int) -> np.ndarray:
        return self.level(degree).root_weights * vector

    def spec_sigma(self, spec: ObservableSpec) -> SetFunction:
        """The pair current of ``spec`` as a degree-2 class function on this torus."""
        return from_class_vector(self.sigma_vector(spec), self.space(2))

    def sigma_hat(self, sigma: SetFunction) -> np.ndarray:
        """W^{1/2} sigma_bar for a degree-2 set function, absolute or class form."""
        if sigma.torus != self.torus or sigma.model.name != self.model.name:
            raise ContractViolationError("Observable lives on a different torus or model")
        sigma_bar = to_class(sigma)
        scale = max((abs(v) for v in sigma_bar.values.values()), default=0.0)
        stray = sorted({
            len(k) for k, v in sigma_bar.values.items()
            if len(k) != 2 and abs(v) > DEGREE_TOLERANCE * scale
        })
        if stray:
            raise ContractViolationError(f"Observable must be supported on degree 2, found degrees {stray}")
        return self.symmetrized(class_vector(sigma_bar, self.space(2)), 2)

    # ------------------------------------------------------------------
    # Solvers
    # ------------------------------------------------------------------

    def _solve_spd(self, operator, rhs: np.ndarray, tolerance: float, label: str) -> np.ndarray:
        norm = float(np.linalg.norm(rhs))
        if norm == 0.0:
            return np.zeros_like(rhs)
        counter = _IterationCounter()
        x, info = cg(operator, rhs, rtol=tolerance, atol=0.0, maxiter=self.max_iter, callback=counter)
        self.last_iterations += counter.count
        if info != 0:
            residual = float(np.linalg.norm(operator @ x - rhs)) / norm
            raise SolverError(
                f"Conjugate gradients on {label} did not converge",
                residual=residual,
                iterations=counter.count,
                tolerance=tolerance,
            )
        return x

    def schur_operator(self, degree: int, n: int, lam: float) -> LinearOperator:
        """K_degree for the truncation at n, as a (nested) linear operator."""
        diagonal = self.level(degree).shifted(lam)
        if degree == n:
            return aslinearoperator(diagonal)
        coupling = self.coupling(degree)
        inner = self.schur_operator(degree + 1, n, lam)
        inner_tolerance = self.tolerance * 1e-2

        def matvec(x):
            x = np.ravel(x)
            y = self._solve_spd(inner, coupling @ x, inner_tolerance, f"K_{degree + 1}")
            return diagonal @ x + coupling.T @ y

        size = diagonal.shape[0]
        return LinearOperator((size, size), matvec=matvec, dtype=np.float64)

    def coupled_system(self, n: int, lam: float) -> sparse.csr_matrix:
        """Signed block tridiagonal system over degrees 2..n."""
        degrees = list(range(2, n + 1))
        blocks: List[List[Optional[sparse.spmatrix]]] = [[None] * len(degrees) for _ in degrees]
        for i, k in enumerate(degrees):
            sign = -1.0 if k % 2 else 1.0
            blocks[i][i] = sign * self.level(k).shifted(lam)
            if k < n:
                coupling = self.coupling(k)
                blocks[i][i + 1] = sign * coupling.T
                blocks[i + 1][i] = sign * coupling
        return sparse.bmat(blocks, format="csr")

    def _solve_coupled(self, rhs: np.ndarray, n: int, lam: float) -> np.ndarray:
        system = self.coupled_system(n, lam)
        full = np.zeros(system.shape[0])
        full[: rhs.size] = rhs
        counter = _IterationCounter()
        x, info = minres(system, full, rtol=self.tolerance, maxiter=self.max_iter, callback=counter)
        self.last_iterations += counter.count
        residual = float(np.linalg.norm(system @ x - full)) / float(np.linalg.norm(full))
        if info != 0:
            raise SolverError(
                f"MINRES on the degree-{n} hierarchy did not converge",
                residual=residual,
                iterations=counter.count,
                tolerance=self.tolerance,
            )
        return x[: rhs.size]

    def solve(self, sigma_hat: np.ndarray, lam: float, n: int, method: str = "auto") -> np.ndarray:
        """Degree-2 block u_hat_2 of the truncated resolvent equation."""
        if method not in METHODS:
            raise UnknownOperatorError(f"Unknown hierarchy method '{method}'", ", ".join(METHODS))
        if lam <= 0:
            raise ContractViolationError(f"Resolvent parameter must be positive, got {lam}")
        if n < 2:
            raise ContractViolationError(f"Truncation degree must be >= 2, got {n}")
        if method == "auto":
            method = "schur" if n <= 3 else "coupled"
        self.last_iterations = 0
        if method == "schur":
            return self._solve_spd(self.schur_operator(2, n, lam), sigma_hat, self.tolerance, "K_2")
        return self._solve_coupled(sigma_hat, n, lam)

    # ------------------------------------------------------------------
    # Public values
    # ------------------------------------------------------------------

    def truncated_resolvent(
        self,
        sigma: SetFunction,
        lam: float,
        n: int,
        method: str = "auto",
    ) -> ResolventResult:
        """<<sigma, T_n sigma>> for a degree-2 observable sigma."""
        sigma_hat = self.sigma_hat(sigma)
        start = time.perf_counter()
        solution = self.solve(sigma_hat, lam, n, method)
        value = float(sigma_hat @ solution)
        elapsed = time.perf_counter() - start
        logger.info(
            f"T_{n}(lambda={lam}) = {value:.10g} on L={self.torus.side} "
            f"({'hard-core' if self.hardcore else 'removed'}, {self.collision}, "
            f"{self.last_iterations} iterations, {elapsed:.1f}s)"
        )
        return ResolventResult(
            lam=lam,
            n=n,
            value=value,
            hardcore=self.hardcore,
            collision=self.collision,
            side=self.torus.side,
            preset=self.model.name,
            method=method if method != "auto" else ("schur" if n <= 3 else "coupled"),
            iterations=self.last_iterations,
            sigma_norm=float(sigma_hat @ sigma_hat),
            class_counts={str(k): self.space(k).size for k in range(2, n + 1)},
        )

    def spec_resolvent(self, spec: ObservableSpec, lam: float, n: int, method: str = "auto") -> ResolventResult:
        return self.truncated_resolvent(self.spec_sigma(spec), lam, n, method)

    def variational_value(self, sigma: SetFunction, lam: float, trial: SetFunction) -> float:
        """2<<sigma, F>> - <<F, (lambda - S - Lc1) F>> - <<J+ F, (lambda - S - Lc1)^{-1} J+ F>>.

        A lower bound on the n = 3 value for every degree-2 trial F.
        """
        sigma_hat = self.sigma_hat(sigma)
        trial_hat = self.sigma_hat(trial)
        raised = self.coupling(2) @ trial_hat
        inner = self._solve_spd(aslinearoperator(self.level(3).shifted(lam)), raised, self.tolerance, "K_3")
        return float(
            2.0 * sigma_hat @ trial_hat
            - trial_hat @ (self.level(2).shifted(lam) @ trial_hat)
            - raised @ inner
        )

    def solution_function(self, sigma: SetFunction, lam: float, n: int) -> SetFunction:
        """The degree-2 part of the truncated solution as a class function."""
        level = self.level(2)
        u_bar = self.solve(self.sigma_hat(sigma), lam, n) / level.root_weights
        return from_class_vector(u_bar, level.space)


_services: Dict[Tuple, HierarchyService] = {}


def get_hierarchy_service(
    model: VelocityModel,
    torus: Torus,
    hardcore: bool = True,
    collision: str = "Lc1",
) -> HierarchyService:
    """Shared service per (model, torus, space type, collision variant)."""
    key = (model, torus, hardcore, collision)
    if key not in _services:
        _services[key] = HierarchyService(model, torus, hardcore, collision)
    return _services[key]


def interleaving_values(
    spec: ObservableSpec,
    model: VelocityModel,
    torus: Torus,
    lam: float,
    degrees: Tuple[int, ...] = (2, 3, 4),
    hardcore: bool = True,
) -> Dict[int, float]:
    """Truncated values at several depths; odd depths bound from below, even from above."""
    service = get_hierarchy_service(model, torus, hardcore)
    return {n: service.spec_resolvent(spec, lam, n).value for n in degrees}


def compare_hardcore_removed(
    spec: ObservableSpec,
    model: VelocityModel,
    torus: Torus,
    lam: float,
    n: int = 2,
    collision: str = "Lc1",
) -> Dict[str, float]:
    """Hard-core and hard-core-removed values of the same truncation, with their ratio."""
    hardcore = get_hierarchy_service(model, torus, True, collision).spec_resolvent(spec, lam, n).value
    removed = get_hierarchy_service(model, torus, False, collision).spec_resolvent(spec, lam, n).value
    return {
        "lam": lam,
        "n": n,
        "hardcore": hardcore,
        "removed": removed,
        "ratio": hardcore / removed if removed else float("nan"),
    }
