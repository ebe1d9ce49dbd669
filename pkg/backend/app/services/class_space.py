"""Translation classes of n-point sets on the torus.

Points are coded ``site * n_velocities + v``. A class is represented by its
canonical member: among the translates that move one of its points to the
origin, the one whose sorted code tuple is lexicographically least. The
sorted tuple is packed into one int64 key in base P = L^2 |V|, so sorted
key arrays give O(log N) lookup.

With ``hardcore=False`` the members are multisets (symmetric functions on
tuples with repeated points allowed).

Each class carries the weight 4^-n / (prod m_i! |Stab|) used by the dual
inner product, where m_i are point multiplicities and Stab is the group of
translations fixing the member.
"""
import logging
import math
from functools import lru_cache
from itertools import chain, combinations, combinations_with_replacement, islice
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.config import get_settings
from app.core.exceptions import ContractViolationError
from app.services.lattice_model import Torus, VelocityModel

logger = logging.getLogger(__name__)

KEY_BITS = 62


def _powers(n_points: int, degree: int) -> np.ndarray:
    if degree * math.log2(max(n_points, 2)) > KEY_BITS:
        raise ContractViolationError(
            f"Degree {degree} over {n_points} points does not fit a {KEY_BITS}-bit class key"
        )
    return n_points ** np.arange(degree - 1, -1, -1, dtype=np.int64)


def canonical_keys(sets: np.ndarray, torus: Torus, n_velocities: int) -> Tuple[np.ndarray, np.ndarray]:
    """Canonical keys and stabilizer sizes for rows of point codes (any order)."""
    sets = np.asarray(sets, dtype=np.int64)
    degree = sets.shape[1]
    powers = _powers(torus.n_sites * n_velocities, degree)
    side = torus.side
    sites = sets // n_velocities
    velocities = sets % n_velocities
    x1, x2 = sites // side, sites % side

    anchor_keys = np.empty(sets.shape, dtype=np.int64)
    for a in range(degree):
        moved = ((x1 - x1[:, a:a + 1]) % side) * side + (x2 - x2[:, a:a + 1]) % side
        anchor_keys[:, a] = np.sort(moved * n_velocities + velocities, axis=1) @ powers
    keys = anchor_keys.min(axis=1)

    # Distinct anchor sites reaching the minimum are the stabilizing translations
    stabilizer = np.zeros(sets.shape[0], dtype=np.int64)
    for a in range(degree):
        fresh = np.ones(sets.shape[0], dtype=bool)
        for b in range(a):
            fresh &= sites[:, b] != sites[:, a]
        stabilizer += (anchor_keys[:, a] == keys) & fresh
    return keys, stabilizer


def decode_keys(keys: np.ndarray, n_points: int, degree: int) -> np.ndarray:
    """Sorted point codes packed in each key."""
    keys = np.asarray(keys, dtype=np.int64).copy()
    codes = np.empty((keys.size, degree), dtype=np.int64)
    for i in range(degree - 1, -1, -1):
        codes[:, i] = keys % n_points
        keys //= n_points
    return codes


def canonical_member(codes: Sequence[int], torus: Torus, n_velocities: int) -> Tuple[Tuple[int, ...], int]:
    """Canonical representative of one set and its stabilizer size."""
    codes = list(codes)
    if not codes:
        return (), torus.n_sites
    keys, stabilizer = canonical_keys(np.asarray(codes).reshape(1, -1), torus, n_velocities)
    member = decode_keys(keys, torus.n_sites * n_velocities, len(codes))[0]
    return tuple(int(c) for c in member), int(stabilizer[0])


class ClassSpace:
    """Canonical representatives of degree-n translation classes."""

    def __init__(
        self,
        model: VelocityModel,
        torus: Torus,
        degree: int,
        hardcore: bool = True,
        chunk_size: Optional[int] = None,
    ):
        if degree < 1:
            raise ContractViolationError(f"Class spaces start at degree 1, got {degree}")
        self.model = model
        self.torus = torus
        self.degree = int(degree)
        self.hardcore = hardcore
        self.n_velocities = model.n_velocities
        self.n_points = torus.n_sites * model.n_velocities
        _powers(self.n_points, self.degree)
        self.chunk_size = chunk_size or get_settings().canonical_chunk_size

        self.keys = self._enumerate()
        self.reps = decode_keys(self.keys, self.n_points, self.degree)
        _, self.stabilizer = self.canonicalize(self.reps)
        self.multiplicity = multiplicity_factor(self.reps)
        self.weights = 0.25 ** degree / (self.multiplicity * self.stabilizer)
        logger.info(
            f"Degree-{degree} {'hard-core' if hardcore else 'multiset'} classes on "
            f"L={torus.side}: {self.size}"
        )

    @property
    def size(self) -> int:
        return int(self.keys.size)

    def __len__(self) -> int:
        return self.size

    def canonicalize(self, sets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sets = np.asarray(sets, dtype=np.int64).reshape(-1, self.degree)
        return canonical_keys(sets, self.torus, self.n_velocities)

    def lookup(self, sets: np.ndarray) -> np.ndarray:
        """Class index of each row, -1 where the row is not a member of this space."""
        sets = np.asarray(sets, dtype=np.int64).reshape(-1, self.degree)
        if sets.shape[0] == 0 or self.size == 0:
            return np.full(sets.shape[0], -1, dtype=np.int64)
        keys, _ = self.canonicalize(sets)
        position = np.minimum(np.searchsorted(self.keys, keys), self.size - 1)
        found = self.keys[position] == keys
        return np.where(found, position, -1)

    def index(self, codes: Sequence[int]) -> int:
        return int(self.lookup(np.asarray(codes).reshape(1, -1))[0])

    def points(self, i: int) -> List[Tuple[Tuple[int, int], int]]:
        return [
            (self.torus.site_coords(int(c) // self.n_velocities), int(c) % self.n_velocities)
            for c in self.reps[i]
        ]

    def _enumerate(self) -> np.ndarray:
        n_velocities = self.n_velocities
        if self.degree == 1:
            return np.arange(n_velocities, dtype=np.int64)

        pick = combinations if self.hardcore else combinations_with_replacement
        found: List[np.ndarray] = []
        # Canonical members have their least code at the origin site
        for first in range(n_velocities):
            start = first + 1 if self.hardcore else first
            rest = pick(range(start, self.n_points), self.degree - 1)
            while True:
                block = np.fromiter(
                    chain.from_iterable(islice(rest, self.chunk_size)), dtype=np.int64
                )
                if block.size == 0:
                    break
                block = block.reshape(-1, self.degree - 1)
                sets = np.column_stack([np.full(block.shape[0], first, dtype=np.int64), block])
                keys, _ = self.canonicalize(sets)
                found.append(np.unique(keys))
        return np.unique(np.concatenate(found)) if found else np.empty(0, dtype=np.int64)


def multiplicity_factor(sorted_rows: np.ndarray) -> np.ndarray:
    """prod_i m_i! for rows of sorted codes."""
    rows = np.asarray(sorted_rows, dtype=np.int64)
    factor = np.ones(rows.shape[0], dtype=np.int64)
    run = np.ones(rows.shape[0], dtype=np.int64)
    for i in range(1, rows.shape[1]):
        same = rows[:, i] == rows[:, i - 1]
        run = np.where(same, run + 1, 1)
        factor *= run
    return factor


@lru_cache(maxsize=16)
def class_space(model: VelocityModel, torus: Torus, degree: int, hardcore: bool = True) -> ClassSpace:
    """Shared, cached class space."""
    return ClassSpace(model, torus, degree, hardcore)
