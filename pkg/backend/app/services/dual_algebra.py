"""Fourier coefficients of local functions and the dual operators.

At lambda = 0 the products Psi_A = prod_{w in A} xi(w) form an orthogonal
basis with <Psi_A, Psi_A> = 4^-|A|. A local function f = sum_A f(A) Psi_A is
identified with its coefficient map A -> f(A), held in a SetFunction.

Two representations are used:

* ``absolute``: keys are finite sets of point codes on the torus. Operators
  act by scattering each coefficient to the sets it feeds.
* ``class``: keys are canonical members of translation classes and the value
  at a class C is f_bar(C) = sum_z f(rep_C + z). Operators act through sparse
  matrices over a ClassSpace. With ``hardcore=False`` keys are multisets and
  the functions are symmetric functions on tuples.

The exclusion generator becomes S + J+ + J- (degree preserving, raising and
lowering); the linearized collision operator becomes Lc1, which moves a point
alone at its site to another velocity through the single-site matrix
Q = -(1/4) sum_q s_q s_q^T. The ``Qn`` variant drops the "alone" condition.
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from app.core.exceptions import ContractViolationError, UnknownOperatorError
from app.services.class_space import (
    ClassSpace,
    canonical_member,
    class_space,
    multiplicity_factor,
)
from app.services.lattice_model import UNIT_VECTORS, Torus, VelocityModel, Vector
from app.services.local_functions import (
    MAX_BITS,
    LocalFunction,
    apply_collision_projection,
    apply_exchange,
    collision_phi,
    point_code,
    state_matrix,
)

logger = logging.getLogger(__name__)

OPERATORS = ("S", "Jplus", "Jminus", "Lc1")
COLLISION_VARIANTS = ("Lc1", "Qn")

Key = Tuple[int, ...]


# ============================================================
# Set functions
# ============================================================

class SetFunction:
    """Sparse, degree-graded map from finite point sets to reals."""

    __slots__ = ("model", "torus", "values", "kind", "hardcore")

    def __init__(
        self,
        model: VelocityModel,
        torus: Torus,
        values: Optional[Mapping[Iterable[int], float]] = None,
        kind: str = "absolute",
        hardcore: bool = True,
    ):
        if kind not in ("absolute", "class"):
            raise ContractViolationError(f"Unknown set function kind '{kind}'")
        if kind == "absolute" and not hardcore:
            raise ContractViolationError("Multiset functions are kept in class form")
        self.model = model
        self.torus = torus
        self.kind = kind
        self.hardcore = hardcore
        self.values: Dict[Key, float] = {}
        for key, value in (values or {}).items():
            key = tuple(sorted(int(c) for c in key))
            if hardcore and len(set(key)) != len(key):
                raise ContractViolationError(f"Key {key} repeats a point")
            if kind == "class" and key and canonical_member(key, torus, model.n_velocities)[0] != key:
                raise ContractViolationError(f"Key {key} is not a canonical class member")
            self.values[key] = self.values.get(key, 0.0) + float(value)

    @classmethod
    def from_points(
        cls,
        model: VelocityModel,
        torus: Torus,
        entries: Mapping[Tuple[Tuple[Vector, int], ...], float],
        kind: str = "absolute",
        hardcore: bool = True,
    ) -> "SetFunction":
        """Build from keys given as tuples of ((x1, x2), v) points."""
        values = {
            tuple(point_code(torus, model, x, v) for x, v in points): value
            for points, value in entries.items()
        }
        return cls(model, torus, values, kind, hardcore)

    def _like(self, values: Mapping[Key, float]) -> "SetFunction":
        out = SetFunction.__new__(type(self))
        out.model = self.model
        out.torus = self.torus
        out.kind = self.kind
        out.hardcore = self.hardcore
        out.values = dict(values)
        return out

    def _check_compatible(self, other: "SetFunction") -> None:
        if (self.kind, self.hardcore, self.torus) != (other.kind, other.hardcore, other.torus):
            raise ContractViolationError("Set functions live in different spaces")

    @property
    def degrees(self) -> List[int]:
        return sorted({len(k) for k, v in self.values.items() if v != 0.0})

    def project(self, degree: int) -> "SetFunction":
        return self._like({k: v for k, v in self.values.items() if len(k) == degree})

    def get(self, key: Iterable[int]) -> float:
        return self.values.get(tuple(sorted(int(c) for c in key)), 0.0)

    def __add__(self, other: "SetFunction") -> "SetFunction":
        self._check_compatible(other)
        values = dict(self.values)
        for k, v in other.values.items():
            values[k] = values.get(k, 0.0) + v
        return self._like(values)

    def __sub__(self, other: "SetFunction") -> "SetFunction":
        return self + other.scale(-1.0)

    def scale(self, factor: float) -> "SetFunction":
        return self._like({k: v * factor for k, v in self.values.items()})

    def max_abs_difference(self, other: "SetFunction") -> float:
        self._check_compatible(other)
        keys = set(self.values) | set(other.values)
        return max((abs(self.values.get(k, 0.0) - other.values.get(k, 0.0)) for k in keys), default=0.0)

    def items(self):
        return self.values.items()

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(kind={self.kind}, entries={len(self.values)}, degrees={self.degrees})"


class SymmetricTupleFunction(SetFunction):
    """Symmetric function on tuples of points, stored by sorted multiset in class form."""

    def __init__(
        self,
        model: VelocityModel,
        torus: Torus,
        values: Optional[Mapping[Iterable[int], float]] = None,
    ):
        super().__init__(model, torus, values, kind="class", hardcore=False)

    @classmethod
    def embed(cls, f: SetFunction) -> "SymmetricTupleFunction":
        """Extension of a class set function by zero off the distinct-point tuples."""
        if f.kind != "class":
            f = to_class(f)
        return cls(f.model, f.torus, f.values)

    def value_at(self, points: Sequence[int]) -> float:
        return self.values.get(tuple(sorted(int(c) for c in points)), 0.0)


# ============================================================
# Transform
# ============================================================

def fwht(values: Sequence[float]) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform H[A] = sum_s v[s] (-1)^{|s & A|}."""
    a = np.array(values, dtype=np.float64).reshape(-1)
    h = 1
    while h < a.size:
        a = a.reshape(-1, 2, h)
        a = np.concatenate((a[:, :1] + a[:, 1:], a[:, :1] - a[:, 1:]), axis=1).reshape(-1)
        h *= 2
    return a


def _subset_sizes(m: int) -> np.ndarray:
    index = np.arange(1 << m, dtype=np.int64)
    sizes = np.zeros(index.size, dtype=np.int64)
    for k in range(m):
        sizes += (index >> k) & 1
    return sizes


def transform(f: LocalFunction) -> SetFunction:
    """Coefficients f(A) = 4^|A| <f, Psi_A>, as an absolute set function."""
    m = len(f.bits)
    sizes = _subset_sizes(m)
    coefficients = fwht(f.values) * np.exp2(sizes - m) * np.where(sizes % 2, -1.0, 1.0)
    values = {}
    for mask in np.flatnonzero(coefficients):
        values[tuple(sorted(f.bits[k] for k in range(m) if (mask >> k) & 1))] = float(coefficients[mask])
    return SetFunction(f.model, f.torus, values)


def inverse_transform(g: SetFunction, bits: Optional[Sequence[int]] = None) -> LocalFunction:
    """Truth table of sum_A g(A) Psi_A over ``bits`` (default: the union of the keys)."""
    if g.kind != "absolute":
        raise ContractViolationError("Only absolute set functions have a local inverse")
    bits = tuple(bits) if bits is not None else tuple(sorted({c for k in g.values for c in k}))
    if len(bits) > MAX_BITS:
        raise ContractViolationError(f"Inverse transform over {len(bits)} bits exceeds {MAX_BITS}")
    position = {code: i for i, code in enumerate(bits)}
    table = np.zeros(1 << len(bits), dtype=np.float64)
    for key, value in g.values.items():
        if any(c not in position for c in key):
            raise ContractViolationError(f"Key {key} is outside the requested bits")
        mask = sum(1 << position[c] for c in key)
        table[mask] += value * 0.5 ** len(key) * (-1.0) ** len(key)
    return LocalFunction(g.model, g.torus, bits, fwht(table))


def to_class(g: SetFunction) -> SetFunction:
    """f_bar(C) = sum_z f(rep_C + z) = |Stab_C| sum_{A in C} f(A); the empty set is dropped."""
    if g.kind == "class":
        return g
    n_velocities = g.model.n_velocities
    values: Dict[Key, float] = defaultdict(float)
    for key, value in g.values.items():
        if not key or value == 0.0:
            continue
        member, stabilizer = canonical_member(key, g.torus, n_velocities)
        values[member] += stabilizer * value
    return SetFunction(g.model, g.torus, values, kind="class", hardcore=True)


# ============================================================
# Single-site collision matrix
# ============================================================

def collision_signs(model: VelocityModel) -> np.ndarray:
    """s_q[u]: coefficient of xi(u) in phi_1 for each quadruple, shape (|Q|, |V|)."""
    signs = np.zeros((len(model.collisions), model.n_velocities), dtype=np.float64)
    for i, (v, w, vp, wp) in enumerate(model.collisions):
        signs[i, [vp, wp]] += 1.0
        signs[i, [v, w]] -= 1.0
    return signs


def collision_q_matrix(model: VelocityModel) -> np.ndarray:
    """Q = -(1/4) sum_q s_q s_q^T, the single-site action of Lc1 on degree one."""
    signs = collision_signs(model)
    return -0.25 * signs.T @ signs


# ============================================================
# Absolute-mode operators
# ============================================================

def _absolute_diffusion(g: SetFunction, collision: str) -> SetFunction:
    gamma = g.model.gamma
    n_velocities = g.model.n_velocities
    neighbors = g.torus.neighbor_table
    out: Dict[Key, float] = defaultdict(float)
    for key, value in g.values.items():
        if value == 0.0:
            continue
        members = set(key)
        for code in key:
            site, v = divmod(code, n_velocities)
            for k in range(len(UNIT_VECTORS)):
                moved = int(neighbors[site, k]) * n_velocities + v
                if moved in members:
                    continue
                out[tuple(sorted((members - {code}) | {moved}))] += gamma * value
                out[key] -= gamma * value
    return g._like(out)


def _absolute_raise(g: SetFunction, collision: str) -> SetFunction:
    n_velocities = g.model.n_velocities
    velocities = g.model.velocities
    neighbors = g.torus.neighbor_table
    out: Dict[Key, float] = defaultdict(float)
    for key, value in g.values.items():
        if value == 0.0:
            continue
        members = set(key)
        for code in key:
            site, v = divmod(code, n_velocities)
            for j in (0, 1):
                weight = velocities[v][j]
                if not weight:
                    continue
                upper = int(neighbors[site, j]) * n_velocities + v
                if upper not in members:
                    out[tuple(sorted(members | {upper}))] += weight * value
                lower = int(neighbors[site, j + 2]) * n_velocities + v
                if lower not in members:
                    out[tuple(sorted(members | {lower}))] -= weight * value
    return g._like(out)


def _absolute_lower(g: SetFunction, collision: str) -> SetFunction:
    n_velocities = g.model.n_velocities
    velocities = g.model.velocities
    neighbors = g.torus.neighbor_table
    out: Dict[Key, float] = defaultdict(float)
    for key, value in g.values.items():
        if value == 0.0:
            continue
        members = set(key)
        for code in key:
            site, v = divmod(code, n_velocities)
            weight = 0.0
            for j in (0, 1):
                if not velocities[v][j]:
                    continue
                upper = int(neighbors[site, j]) * n_velocities + v
                lower = int(neighbors[site, j + 2]) * n_velocities + v
                weight += velocities[v][j] * ((upper in members) - (lower in members))
            if weight:
                out[tuple(c for c in key if c != code)] += 0.25 * weight * value
    return g._like(out)


def _absolute_collision(g: SetFunction, collision: str) -> SetFunction:
    q_matrix = collision_q_matrix(g.model)
    n_velocities = g.model.n_velocities
    out: Dict[Key, float] = defaultdict(float)
    for key, value in g.values.items():
        if value == 0.0:
            continue
        members = set(key)
        occupancy = Counter(code // n_velocities for code in key)
        for code in key:
            site, u = divmod(code, n_velocities)
            if collision == "Lc1" and occupancy[site] > 1:
                continue
            for target in range(n_velocities):
                weight = q_matrix[target, u]
                moved = site * n_velocities + target
                if weight == 0.0 or (moved != code and moved in members):
                    continue
                out[tuple(sorted((members - {code}) | {moved}))] += weight * value
    return g._like(out)


_ABSOLUTE = {
    "S": _absolute_diffusion,
    "Jplus": _absolute_raise,
    "Jminus": _absolute_lower,
    "Lc1": _absolute_collision,
}


# ============================================================
# Class-mode operator matrices
# ============================================================

def _shift(codes: np.ndarray, direction: int, torus: Torus, n_velocities: int) -> np.ndarray:
    return torus.neighbor_table[codes // n_velocities, direction] * n_velocities + codes % n_velocities


def _others_differ(reps: np.ndarray, i: int, candidate: np.ndarray) -> np.ndarray:
    ok = np.ones(reps.shape[0], dtype=bool)
    for j in range(reps.shape[1]):
        if j != i:
            ok &= reps[:, j] != candidate
    return ok


def _chunks(size: int, chunk: int) -> Iterable[slice]:
    for start in range(0, size, chunk):
        yield slice(start, min(start + chunk, size))


def _assemble(rows: List[np.ndarray], cols: List[np.ndarray], data: List[np.ndarray], shape) -> sparse.csr_matrix:
    if not rows:
        return sparse.csr_matrix(shape)
    return sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    ).tocsr()


def _require_found(targets: np.ndarray, what: str) -> None:
    if np.any(targets < 0):
        raise ContractViolationError(f"{what} produced a set outside the class space")


def diffusion_matrix(space: ClassSpace) -> sparse.csr_matrix:
    """S: each point steps to a neighbour; blocked steps are dropped in the hard-core space."""
    gamma = space.model.gamma
    n_velocities = space.n_velocities
    rows, cols, data = [], [], []
    diagonal = np.zeros(space.size)
    for block in _chunks(space.size, space.chunk_size):
        reps = space.reps[block]
        index = np.arange(space.size)[block]
        for i in range(space.degree):
            for k in range(len(UNIT_VECTORS)):
                moved = reps.copy()
                moved[:, i] = _shift(reps[:, i], k, space.torus, n_velocities)
                valid = _others_differ(reps, i, moved[:, i]) if space.hardcore else np.ones(len(index), bool)
                targets = space.lookup(moved[valid])
                _require_found(targets, "S")
                rows.append(index[valid])
                cols.append(targets)
                data.append(np.full(targets.size, gamma))
                np.subtract.at(diagonal, index[valid], gamma)
    matrix = _assemble(rows, cols, data, (space.size, space.size))
    return (matrix + sparse.diags(diagonal)).tocsr()


def collision_matrix(space: ClassSpace, collision: str = "Lc1") -> sparse.csr_matrix:
    """Lc1 (points alone at their site) or Qn (every point) acting through Q."""
    if collision not in COLLISION_VARIANTS:
        raise UnknownOperatorError(f"Unknown collision variant '{collision}'", ", ".join(COLLISION_VARIANTS))
    q_matrix = collision_q_matrix(space.model)
    n_velocities = space.n_velocities
    rows, cols, data = [], [], []
    for block in _chunks(space.size, space.chunk_size):
        reps = space.reps[block]
        index = np.arange(space.size)[block]
        sites = reps // n_velocities
        for i in range(space.degree):
            velocity = reps[:, i] % n_velocities
            alone = np.ones(len(index), dtype=bool)
            if collision == "Lc1":
                for j in range(space.degree):
                    if j != i:
                        alone &= sites[:, j] != sites[:, i]
            for target in range(n_velocities):
                weight = q_matrix[velocity, target]
                mask = alone & (weight != 0.0)
                moved = reps.copy()
                moved[:, i] = sites[:, i] * n_velocities + target
                if space.hardcore:
                    mask &= (velocity == target) | _others_differ(reps, i, moved[:, i])
                targets = space.lookup(moved[mask])
                _require_found(targets, "Lc1")
                rows.append(index[mask])
                cols.append(targets)
                data.append(weight[mask])
    return _assemble(rows, cols, data, (space.size, space.size))


def raise_matrix(upper: ClassSpace, lower: ClassSpace) -> sparse.csr_matrix:
    """J+ from degree n (columns) to degree n + 1 (rows), gathered at the upper representatives."""
    if upper.degree != lower.degree + 1 or upper.hardcore != lower.hardcore:
        raise ContractViolationError("J+ needs spaces of consecutive degrees and equal type")
    velocities = upper.model.velocity_array
    n_velocities = upper.n_velocities
    rows, cols, data = [], [], []
    for block in _chunks(upper.size, upper.chunk_size):
        reps = upper.reps[block]
        index = np.arange(upper.size)[block]
        for j_axis in (0, 1):
            shifted = [_shift(reps[:, p], j_axis, upper.torus, n_velocities) for p in range(upper.degree)]
            for hi in range(upper.degree):
                weight = velocities[reps[:, hi] % n_velocities, j_axis].astype(np.float64)
                for lo in range(upper.degree):
                    if lo == hi:
                        continue
                    mask = (shifted[lo] == reps[:, hi]) & (weight != 0.0)
                    if not mask.any():
                        continue
                    without_hi = lower.lookup(np.delete(reps[mask], hi, axis=1))
                    without_lo = lower.lookup(np.delete(reps[mask], lo, axis=1))
                    _require_found(without_hi, "J+")
                    _require_found(without_lo, "J+")
                    rows.extend([index[mask], index[mask]])
                    cols.extend([without_hi, without_lo])
                    data.extend([weight[mask], -weight[mask]])
    return _assemble(rows, cols, data, (upper.size, lower.size))


def lower_matrix(upper: ClassSpace, lower: ClassSpace) -> sparse.csr_matrix:
    """J- = -W_lower^{-1} (J+)^T W_upper, the negative adjoint of J+."""
    raised = raise_matrix(upper, lower)
    return (-sparse.diags(1.0 / lower.weights) @ raised.T @ sparse.diags(upper.weights)).tocsr()


@lru_cache(maxsize=64)
def operator_matrix(
    op: str,
    model: VelocityModel,
    torus: Torus,
    degree: int,
    hardcore: bool = True,
    collision: str = "Lc1",
) -> sparse.csr_matrix:
    """Matrix of ``op`` acting on class functions of the given input degree."""
    if op == "S":
        return diffusion_matrix(class_space(model, torus, degree, hardcore))
    if op == "Lc1":
        return collision_matrix(class_space(model, torus, degree, hardcore), collision)
    if op == "Jplus":
        return raise_matrix(
            class_space(model, torus, degree + 1, hardcore), class_space(model, torus, degree, hardcore)
        )
    if op == "Jminus":
        return lower_matrix(
            class_space(model, torus, degree, hardcore), class_space(model, torus, degree - 1, hardcore)
        )
    raise UnknownOperatorError(f"Unknown dual operator '{op}'", ", ".join(OPERATORS))


def class_vector(g: SetFunction, space: ClassSpace) -> np.ndarray:
    """Dense vector of f_bar over the classes of ``space``."""
    vector = np.zeros(space.size)
    part = [(k, v) for k, v in g.values.items() if len(k) == space.degree]
    if not part:
        return vector
    index = space.lookup(np.array([k for k, _ in part], dtype=np.int64))
    _require_found(index, "Class vector")
    np.add.at(vector, index, [v for _, v in part])
    return vector


def from_class_vector(
    vector: np.ndarray,
    space: ClassSpace,
    cls: type = SetFunction,
) -> SetFunction:
    # Representatives are canonical already, so validation is skipped
    out = SetFunction.__new__(cls)
    out.model = space.model
    out.torus = space.torus
    out.kind = "class"
    out.hardcore = space.hardcore
    out.values = {tuple(int(c) for c in space.reps[i]): float(vector[i]) for i in np.flatnonzero(vector)}
    return out


def apply_dual(op: str, g: SetFunction, hardcore: bool = True, collision: str = "Lc1") -> SetFunction:
    """Apply S, Jplus, Jminus or Lc1 to a set function."""
    if op not in OPERATORS:
        raise UnknownOperatorError(f"Unknown dual operator '{op}'", ", ".join(OPERATORS))
    if collision not in COLLISION_VARIANTS:
        raise UnknownOperatorError(f"Unknown collision variant '{collision}'", ", ".join(COLLISION_VARIANTS))
    if g.hardcore != hardcore:
        raise ContractViolationError("Set function type does not match the requested space")
    if g.kind == "absolute":
        return _ABSOLUTE[op](g, collision)

    shift = {"S": 0, "Lc1": 0, "Jplus": 1, "Jminus": -1}[op]
    result = g._like({})
    for degree in g.degrees:
        if degree < 1 or degree + shift < 1:
            continue
        space_in = class_space(g.model, g.torus, degree, hardcore)
        space_out = class_space(g.model, g.torus, degree + shift, hardcore)
        matrix = operator_matrix(op, g.model, g.torus, degree, hardcore, collision)
        produced = from_class_vector(matrix @ class_vector(g, space_in), space_out, type(g))
        result = result + produced
    return result


# ============================================================
# Inner products
# ============================================================

def class_weight(key: Key, torus: Torus, n_velocities: int) -> float:
    """4^-n / (prod m_i! |Stab|) for a canonical member."""
    _, stabilizer = canonical_member(key, torus, n_velocities)
    multiplicity = int(multiplicity_factor(np.array([key], dtype=np.int64))[0])
    return 0.25 ** len(key) / (multiplicity * stabilizer)


def dual_inner_product(f: SetFunction, g: SetFunction) -> float:
    """<<f, g>> = sum_n 4^-n sum over classes f_bar g_bar / (prod m_i! |Stab|)."""
    f_bar, g_bar = to_class(f), to_class(g)
    if f_bar.hardcore != g_bar.hardcore or f_bar.torus != g_bar.torus:
        raise ContractViolationError("Inner product between different spaces")
    n_velocities = f.model.n_velocities
    total = 0.0
    for key, a in f_bar.values.items():
        b = g_bar.values.get(key, 0.0)
        if a and b and key:
            total += a * b * class_weight(key, f.torus, n_velocities)
    return total


def parseval_inner(f: SetFunction, g: SetFunction) -> float:
    """<f, g>_{mu_0} = sum_A 4^-|A| f(A) g(A) for absolute set functions."""
    if f.kind != "absolute" or g.kind != "absolute":
        raise ContractViolationError("Parseval pairs absolute set functions")
    return sum(a * g.values.get(k, 0.0) * 0.25 ** len(k) for k, a in f.values.items())


def brute_force_inner(f: LocalFunction, g: LocalFunction) -> float:
    """sum_z Cov(tau_z f, g) by enumeration on the torus."""
    return sum(f.shift(z).covariance(g) for z in f.torus.sites())


# ============================================================
# Single-site collision spectrum
# ============================================================

@dataclass
class QuadrupleDiagnostics:
    """Checks of one quadruple's single-site generator L_q."""
    quadruple: Tuple[int, int, int, int]
    eigenvalues: List[float]
    psi_eigenvalue: float
    psi_residual: float
    degree_one_residual: float
    degree_two_residual: float
    degree_three_residual: float
    degree_four_residual: float
    comparison_gap: float


@dataclass
class CollisionSpectrum:
    """Spectral data of the single-site matrix Q of Lc1 on degree one."""
    q_matrix: np.ndarray
    eigenvalues: np.ndarray
    diagonalizer: np.ndarray
    zero_projector: np.ndarray
    kernel_dimension: int
    conserved_residual: float
    quadruples: List[QuadrupleDiagnostics] = field(default_factory=list)

    @property
    def is_negative_semidefinite(self) -> bool:
        return bool(self.eigenvalues.max() <= 1e-12)


def single_site_generator(model: VelocityModel, quadruple: Sequence[int]) -> np.ndarray:
    """L_q on {0,1}^V: rate 2 between {v, w} occupied / {v', w'} empty and the reverse."""
    states = state_matrix(model.n_velocities).astype(np.int64)
    v, w, vp, wp = quadruple
    size = states.shape[0]
    matrix = np.zeros((size, size))
    weights = 1 << np.arange(model.n_velocities, dtype=np.int64)
    for s, row in enumerate(states):
        forward = row[v] and row[w] and not row[vp] and not row[wp]
        backward = row[vp] and row[wp] and not row[v] and not row[w]
        if forward or backward:
            moved = row.copy()
            moved[[v, w, vp, wp]] = row[[vp, wp, v, w]]
            matrix[s, int(moved @ weights)] += 2.0
            matrix[s, s] -= 2.0
    return matrix


def _rank_one(phi: np.ndarray) -> np.ndarray:
    """-4 <f, phi> / <phi, phi> phi as a matrix under the uniform measure."""
    norm = float(np.mean(phi * phi))
    return -4.0 * np.outer(phi, phi) / (phi.size * norm)


def _quadruple_diagnostics(model: VelocityModel, quadruple: Tuple[int, int, int, int]) -> QuadrupleDiagnostics:
    n_velocities = model.n_velocities
    states = state_matrix(n_velocities)
    columns = list(range(n_velocities))
    generator = single_site_generator(model, quadruple)
    phi1 = collision_phi(states, columns, quadruple, 1)
    phi3 = collision_phi(states, columns, quadruple, 3)
    psi = phi1 + phi3
    xi = {u: states[:, u] - 0.5 for u in columns}
    v, w, vp, wp = quadruple
    one = 0.5 * phi1 + 0.5 * phi3
    three = -0.125 * phi1 - 0.125 * phi3

    def worst(pairs):
        return max(float(np.abs(generator @ f - target).max()) for f, target in pairs)

    degree_one = worst([(xi[v], one), (xi[w], one), (xi[vp], -one), (xi[wp], -one)])
    hq = (v, w, vp, wp)
    degree_two = worst(
        [(xi[a] * xi[b], 0.0 * phi1) for i, a in enumerate(hq) for b in hq[i + 1:]]
    )
    degree_three = worst([
        (xi[v] * xi[w] * xi[vp], three),
        (xi[v] * xi[w] * xi[wp], three),
        (xi[vp] * xi[wp] * xi[v], -three),
        (xi[vp] * xi[wp] * xi[w], -three),
    ])
    degree_four = worst([(xi[v] * xi[w] * xi[vp] * xi[wp], 0.0 * phi1)])
    bound = -2.0 * _rank_one(phi1) - 2.0 * _rank_one(phi3) + generator
    gap = float(np.linalg.eigvalsh((bound + bound.T) / 2.0).min())
    return QuadrupleDiagnostics(
        quadruple=tuple(int(u) for u in quadruple),
        eigenvalues=sorted(float(x) for x in np.linalg.eigvalsh(generator)),
        psi_eigenvalue=float((generator @ psi) @ psi / (psi @ psi)),
        psi_residual=float(np.abs(generator @ psi + 4.0 * psi).max()),
        degree_one_residual=degree_one,
        degree_two_residual=degree_two,
        degree_three_residual=degree_three,
        degree_four_residual=degree_four,
        comparison_gap=gap,
    )


def single_site_collision_spectrum(model: VelocityModel, tolerance: float = 1e-12) -> CollisionSpectrum:
    """Diagonalize Q and check the single-site generator identities for every quadruple."""
    q_matrix = collision_q_matrix(model)
    eigenvalues, diagonalizer = np.linalg.eigh(q_matrix)
    kernel = np.abs(eigenvalues) <= tolerance * max(1.0, float(np.abs(eigenvalues).max()))
    basis = diagonalizer[:, kernel]
    conserved = model.conserved_table.astype(np.float64)
    spectrum = CollisionSpectrum(
        q_matrix=q_matrix,
        eigenvalues=eigenvalues,
        diagonalizer=diagonalizer,
        zero_projector=basis @ basis.T,
        kernel_dimension=int(kernel.sum()),
        conserved_residual=float(np.abs(q_matrix @ conserved.T).max()),
        quadruples=[_quadruple_diagnostics(model, q) for q in model.collisions],
    )
    logger.debug(f"Collision spectrum for '{model.name}': {np.round(eigenvalues, 12)}")
    return spectrum


# ============================================================
# Intertwining checks
# ============================================================

def exchange_intertwining_gap(f: LocalFunction) -> float:
    """max |T(L_ex f) - (S + J+ + J-)(T f)|."""
    coefficients = transform(f)
    lhs = transform(apply_exchange(f))
    rhs = (
        apply_dual("S", coefficients)
        + apply_dual("Jplus", coefficients)
        + apply_dual("Jminus", coefficients)
    )
    return lhs.max_abs_difference(rhs)


def collision_intertwining_gap(f: LocalFunction) -> float:
    """max |T(Lc1 f) - Lc1(T f)|."""
    lhs = transform(apply_collision_projection(f, degree=1))
    rhs = apply_dual("Lc1", transform(f))
    return lhs.max_abs_difference(rhs)
