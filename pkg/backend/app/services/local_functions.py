"""Truth-table local functions and exact generator application.

A LocalFunction depends on finitely many occupancy bits, named by point
codes ``site_index * n_velocities + v``. Its values are stored as a table of
length 2**m where bit k of the table index is the occupancy of ``bits[k]``.

Generators act by exact enumeration: the function is re-expressed on the
extended set of bits the generator touches and evaluated on every state.
Tables hold integer or dyadic values, so float64 arithmetic is exact for
the identities checked in the test suite.
"""
import logging
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from app.core.exceptions import ContractViolationError
from app.services.lattice_model import (
    POSITIVE_DIRECTIONS,
    Configuration,
    Torus,
    VelocityModel,
    Vector,
)

logger = logging.getLogger(__name__)

# Bits per truth table; 2**MAX_BITS states are enumerated at once
MAX_BITS = 22


def state_matrix(m: int) -> np.ndarray:
    """All 2**m states as a (2**m, m) 0/1 matrix; column k is bit k of the row index."""
    if m > MAX_BITS:
        raise ContractViolationError(f"Truth table over {m} bits exceeds the {MAX_BITS}-bit limit")
    index = np.arange(1 << m, dtype=np.int64)
    return ((index[:, None] >> np.arange(m, dtype=np.int64)) & 1).astype(np.int8)


class LocalFunction:
    """Real function of the occupancy bits ``bits`` given by a truth table."""

    __slots__ = ("model", "torus", "bits", "values")

    def __init__(
        self,
        model: VelocityModel,
        torus: Torus,
        bits: Sequence[int],
        values: Sequence[float],
    ):
        bits = tuple(int(b) for b in bits)
        if len(set(bits)) != len(bits):
            raise ContractViolationError("Local function bits must be distinct")
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != 1 << len(bits):
            raise ContractViolationError(
                f"Truth table has {values.size} entries, expected {1 << len(bits)}"
            )
        self.model = model
        self.torus = torus
        self.bits = bits
        self.values = values

    # ------------------------------------------------------------------
    # Construction
    # ------------------------------------------------------------------

    @classmethod
    def constant(cls, model: VelocityModel, torus: Torus, value: float) -> "LocalFunction":
        return cls(model, torus, (), [value])

    @classmethod
    def from_callable(
        cls,
        model: VelocityModel,
        torus: Torus,
        points: Sequence[Tuple[Vector, int]],
        fn: Callable[[Dict[Tuple[Vector, int], int]], float],
    ) -> "LocalFunction":
        """Tabulate ``fn`` which receives a {(site, v): bit} mapping."""
        keys = [(torus.wrap(x), int(v)) for x, v in points]
        bits = [point_code(torus, model, x, v) for x, v in keys]
        states = state_matrix(len(bits))
        values = [fn({key: int(s[k]) for k, key in enumerate(keys)}) for s in states]
        return cls(model, torus, bits, values)

    @classmethod
    def occupation(cls, model: VelocityModel, torus: Torus, x: Vector, v: int) -> "LocalFunction":
        """eta(x, v)."""
        return cls(model, torus, (point_code(torus, model, x, v),), [0.0, 1.0])

    @classmethod
    def centered_occupation(cls, model: VelocityModel, torus: Torus, x: Vector, v: int) -> "LocalFunction":
        """xi(x, v) = eta(x, v) - 1/2."""
        return cls(model, torus, (point_code(torus, model, x, v),), [-0.5, 0.5])

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    @property
    def points(self) -> List[Tuple[Vector, int]]:
        n_velocities = self.model.n_velocities
        return [
            (self.torus.site_coords(code // n_velocities), code % n_velocities)
            for code in self.bits
        ]

    @property
    def support_sites(self) -> List[int]:
        return sorted({code // self.model.n_velocities for code in self.bits})

    def values_on(self, bits: Sequence[int], states: np.ndarray) -> np.ndarray:
        """Evaluate on states given as columns over ``bits`` (a superset of self.bits)."""
        position = {code: i for i, code in enumerate(bits)}
        index = np.zeros(states.shape[0], dtype=np.int64)
        for k, code in enumerate(self.bits):
            index |= states[:, position[code]].astype(np.int64) << k
        return self.values[index]

    def on_bits(self, bits: Sequence[int]) -> "LocalFunction":
        """Same function tabulated over a superset of bits."""
        bits = tuple(bits)
        missing = set(self.bits) - set(bits)
        if missing:
            raise ContractViolationError(f"Target bit set misses {sorted(missing)}")
        return LocalFunction(self.model, self.torus, bits, self.values_on(bits, state_matrix(len(bits))))

    def evaluate(self, config: Configuration) -> float:
        flat = config.occupancy.reshape(-1)
        index = 0
        for k, code in enumerate(self.bits):
            index |= int(flat[code]) << k
        return float(self.values[index])

    def evaluate_many(self, occupancy: np.ndarray) -> np.ndarray:
        """Evaluate on a batch of flattened occupancy arrays, shape (batch, sites * velocities)."""
        index = np.zeros(occupancy.shape[0], dtype=np.int64)
        for k, code in enumerate(self.bits):
            index |= occupancy[:, code].astype(np.int64) << k
        return self.values[index]

    # ------------------------------------------------------------------
    # Algebra
    # ------------------------------------------------------------------

    def _aligned(self, other: "LocalFunction") -> Tuple[Tuple[int, ...], np.ndarray, np.ndarray]:
        bits = self.bits + tuple(b for b in other.bits if b not in self.bits)
        states = state_matrix(len(bits))
        return bits, self.values_on(bits, states), other.values_on(bits, states)

    def __add__(self, other: "LocalFunction") -> "LocalFunction":
        bits, a, b = self._aligned(other)
        return LocalFunction(self.model, self.torus, bits, a + b)

    def __sub__(self, other: "LocalFunction") -> "LocalFunction":
        bits, a, b = self._aligned(other)
        return LocalFunction(self.model, self.torus, bits, a - b)

    def __mul__(self, other: "LocalFunction") -> "LocalFunction":
        bits, a, b = self._aligned(other)
        return LocalFunction(self.model, self.torus, bits, a * b)

    def scale(self, factor: float) -> "LocalFunction":
        return LocalFunction(self.model, self.torus, self.bits, self.values * factor)

    def shift(self, z: Vector) -> "LocalFunction":
        """tau_z f, i.e. the same table read at sites translated by z."""
        n_velocities = self.model.n_velocities
        bits = []
        for code in self.bits:
            x = self.torus.site_coords(code // n_velocities)
            bits.append(self.torus.site_index((x[0] + z[0], x[1] + z[1])) * n_velocities + code % n_velocities)
        return LocalFunction(self.model, self.torus, bits, self.values)

    def expectation(self) -> float:
        """Mean under the lambda = 0 product measure (uniform on states)."""
        return float(self.values.mean())

    def inner(self, other: "LocalFunction") -> float:
        _, a, b = self._aligned(other)
        return float(np.mean(a * b))

    def covariance(self, other: "LocalFunction") -> float:
        return self.inner(other) - self.expectation() * other.expectation()

    def max_abs_difference(self, other: "LocalFunction") -> float:
        _, a, b = self._aligned(other)
        return float(np.max(np.abs(a - b))) if a.size else 0.0

    def __repr__(self) -> str:
        return f"LocalFunction(bits={len(self.bits)}, sites={self.support_sites})"


def point_code(torus: Torus, model: VelocityModel, x: Vector, v: int) -> int:
    return torus.site_index(x) * model.n_velocities + int(v)


# ============================================================
# Generators
# ============================================================

def _extend(bits: Sequence[int], extra: Iterable[int]) -> Tuple[int, ...]:
    seen = set(bits)
    out = list(bits)
    for code in sorted(set(extra)):
        if code not in seen:
            out.append(code)
            seen.add(code)
    return tuple(out)


def _exchange_bonds(f: LocalFunction) -> List[Tuple[int, int, int, int]]:
    """Bonds (lower site, upper site, positive direction, velocity) touching f's bits."""
    n_velocities = f.model.n_velocities
    neighbors = f.torus.neighbor_table
    bonds = set()
    for code in f.bits:
        x, v = divmod(code, n_velocities)
        for k in POSITIVE_DIRECTIONS:
            bonds.add((x, int(neighbors[x, k]), k, v))
            bonds.add((int(neighbors[x, k + 2]), x, k, v))
    return sorted(bonds)


def apply_exchange(f: LocalFunction, adjoint: bool = False) -> LocalFunction:
    """Exclusion part of the generator; ``adjoint`` uses p*(e, v) = p(-e, v)."""
    model = f.model
    n_velocities = model.n_velocities
    rates = model.rate_table
    bonds = _exchange_bonds(f)
    bits = _extend(f.bits, [s * n_velocities + v for lo, hi, _, v in bonds for s in (lo, hi)])
    position = {code: i for i, code in enumerate(bits)}
    states = state_matrix(len(bits))
    base = f.values_on(bits, states)
    out = np.zeros_like(base)
    for lo, hi, k, v in bonds:
        a = position[lo * n_velocities + v]
        b = position[hi * n_velocities + v]
        forward, backward = rates[k, v], rates[k + 2, v]
        if adjoint:
            forward, backward = backward, forward
        moves = forward * ((states[:, a] == 1) & (states[:, b] == 0)) + backward * (
            (states[:, a] == 0) & (states[:, b] == 1)
        )
        swapped = states.copy()
        swapped[:, [a, b]] = states[:, [b, a]]
        out += moves * (f.values_on(bits, swapped) - base)
    return LocalFunction(model, f.torus, bits, out)


def _site_bits(f: LocalFunction) -> Tuple[Tuple[int, ...], List[int]]:
    n_velocities = f.model.n_velocities
    sites = f.support_sites
    bits = _extend(f.bits, [s * n_velocities + u for s in sites for u in range(n_velocities)])
    return bits, sites


def apply_collision(f: LocalFunction) -> LocalFunction:
    """Collision part of the generator: each enabled quadruple fires at rate one."""
    model = f.model
    n_velocities = model.n_velocities
    bits, sites = _site_bits(f)
    position = {code: i for i, code in enumerate(bits)}
    states = state_matrix(len(bits))
    base = f.values_on(bits, states)
    out = np.zeros_like(base)
    for s in sites:
        col = [position[s * n_velocities + u] for u in range(n_velocities)]
        for v, w, vp, wp in model.collisions:
            enabled = (
                (states[:, col[v]] == 1)
                & (states[:, col[w]] == 1)
                & (states[:, col[vp]] == 0)
                & (states[:, col[wp]] == 0)
            )
            swapped = states.copy()
            swapped[:, [col[v], col[w], col[vp], col[wp]]] = states[:, [col[vp], col[wp], col[v], col[w]]]
            out += enabled * (f.values_on(bits, swapped) - base)
    return LocalFunction(model, f.torus, bits, out)


def collision_phi(states: np.ndarray, columns: Sequence[int], quadruple: Sequence[int], degree: int) -> np.ndarray:
    """phi_1 or phi_3 = 4 phi~_3 of a quadruple evaluated on state columns of one site."""
    v, w, vp, wp = quadruple
    xi = {u: states[:, columns[u]] - 0.5 for u in (v, w, vp, wp)}
    if degree == 1:
        return xi[vp] + xi[wp] - xi[v] - xi[w]
    if degree == 3:
        return 4.0 * (
            xi[v] * xi[w] * xi[vp]
            + xi[v] * xi[w] * xi[wp]
            - xi[vp] * xi[wp] * xi[v]
            - xi[vp] * xi[wp] * xi[w]
        )
    raise ContractViolationError(f"Collision pieces exist for degree 1 and 3, got {degree}")


def apply_collision_projection(f: LocalFunction, degree: int = 1) -> LocalFunction:
    """-sum_x sum_q <f, phi_{x,q,j}>_x phi_{x,q,j}; only site x's bits are integrated."""
    model = f.model
    n_velocities = model.n_velocities
    bits, sites = _site_bits(f)
    m = len(bits)
    position = {code: i for i, code in enumerate(bits)}
    states = state_matrix(m)
    base = f.values_on(bits, states)
    out = np.zeros_like(base)
    shape = (2,) * m
    for s in sites:
        col = [position[s * n_velocities + u] for u in range(n_velocities)]
        # Bit k of the flat index is tensor axis m - 1 - k in C order
        axes = tuple(m - 1 - c for c in col)
        for q in model.collisions:
            phi = collision_phi(states, col, q, degree)
            projected = (base * phi).reshape(shape).mean(axis=axes, keepdims=True)
            out -= np.broadcast_to(projected, shape).reshape(-1) * phi
    return LocalFunction(model, f.torus, bits, out)


def apply_generator(f: LocalFunction) -> LocalFunction:
    """Full generator: exclusion plus collisions."""
    return apply_exchange(f) + apply_collision(f)


def random_local_function(
    model: VelocityModel,
    torus: Torus,
    rng: np.random.Generator,
    n_bits: int = 3,
    window: int = 2,
    value_range: int = 3,
) -> LocalFunction:
    """Integer-valued local function on ``n_bits`` random bits inside a window at the origin."""
    n_velocities = model.n_velocities
    candidates = [
        torus.site_index((x1, x2)) * n_velocities + v
        for x1 in range(window)
        for x2 in range(window)
        for v in range(n_velocities)
    ]
    chosen = rng.choice(len(candidates), size=min(n_bits, len(candidates)), replace=False)
    bits = [candidates[i] for i in sorted(chosen)]
    values = rng.integers(-value_range, value_range + 1, size=1 << len(bits)).astype(np.float64)
    return LocalFunction(model, torus, bits, values)
