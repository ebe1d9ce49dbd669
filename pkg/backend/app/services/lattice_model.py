"""
Lattice Model

Velocity lattice gas on a two-dimensional torus.

A configuration holds one occupancy bit per (site, velocity). Particles of
velocity v jump from x to x+e at rate p(e, v) = gamma + (e.v)/2 when the
target slot is empty; two particles at the same site with velocities
(v, w) collide at rate one into (v', w') when those slots are empty.

Velocity indices follow the preset order in data/presets.yaml; the opposite
of velocity i is always velocity (i + 2) mod 4. Collisions are stored as
quadruples of velocity indices (v, w, v', w').

Bitstring format
----------------
    L=<side>;V=<velocities>;<bits>

Sites are row-major (x1 outer, x2 inner), velocities vary fastest.
"""
import logging
from dataclasses import dataclass, replace
from functools import cached_property, lru_cache
from itertools import product
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import yaml

from app.config import DATA_DIR
from app.core.exceptions import ContractViolationError, InvalidGammaError

logger = logging.getLogger(__name__)

Vector = Tuple[int, int]
Quadruple = Tuple[int, int, int, int]

# e1, e2, -e1, -e2; the opposite of direction k is (k + 2) % 4
UNIT_VECTORS: Tuple[Vector, ...] = ((1, 0), (0, 1), (-1, 0), (0, -1))
POSITIVE_DIRECTIONS: Tuple[int, ...] = (0, 1)

PRESETS_PATH = DATA_DIR / "presets.yaml"


def _dot(a: Sequence[int], b: Sequence[int]) -> int:
    return int(a[0]) * int(b[0]) + int(a[1]) * int(b[1])


def jump_rate(e: Sequence[int], v: Sequence[int], gamma: float) -> float:
    """Exchange rate p(e, v) = gamma + (e.v)/2 for a unit lattice vector e."""
    e = (int(e[0]), int(e[1]))
    if e not in UNIT_VECTORS:
        raise ContractViolationError(f"{e} is not a unit lattice vector")
    projection = _dot(e, v)
    rate = float(gamma) + 0.5 * projection
    if rate < 0:
        raise InvalidGammaError(
            f"Negative jump rate {rate} for e={e}, v={tuple(v)}",
            gamma=float(gamma),
            minimum=abs(projection) / 2.0,
        )
    return rate


def opposite_pair_collisions(velocities: Sequence[Vector]) -> Tuple[Quadruple, ...]:
    """All (v, w, v', w') with v+w = v'+w' = 0 and {v', w'} disjoint from {v, w}."""
    n = len(velocities)
    quads = []
    for v, w, vp, wp in product(range(n), repeat=4):
        if {vp, wp} & {v, w}:
            continue
        if any(velocities[v][k] + velocities[w][k] for k in range(2)):
            continue
        if any(velocities[vp][k] + velocities[wp][k] for k in range(2)):
            continue
        quads.append((v, w, vp, wp))
    return tuple(quads)


COLLISION_RULES = {
    "opposite_pairs": opposite_pair_collisions,
}


@dataclass(frozen=True)
class VelocityModel:
    """Velocity set, collision set and drift strength.

    Immutable after construction and safe to share between threads.
    """
    velocities: Tuple[Vector, ...]
    collisions: Tuple[Quadruple, ...]
    gamma: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(
            self, "velocities", tuple((int(v[0]), int(v[1])) for v in self.velocities)
        )
        object.__setattr__(self, "collisions", tuple(tuple(q) for q in self.collisions))
        object.__setattr__(self, "gamma", float(self.gamma))
        self._check_collisions()
        if self.gamma < self.min_gamma:
            raise InvalidGammaError(
                f"gamma={self.gamma} gives negative exchange rates for preset '{self.name}'",
                gamma=self.gamma,
                minimum=self.min_gamma,
            )

    def _check_collisions(self) -> None:
        velocities = self.velocities
        present = set(self.collisions)
        for q in self.collisions:
            v, w, vp, wp = q
            for k in range(2):
                if velocities[v][k] + velocities[w][k] != velocities[vp][k] + velocities[wp][k]:
                    raise ContractViolationError(f"Collision {q} does not conserve momentum")
            for image in ((v, w, wp, vp), (vp, wp, v, w), (vp, wp, w, v)):
                if image not in present:
                    raise ContractViolationError(
                        f"Collision set is not closed: {image} missing for {q}"
                    )

    @property
    def n_velocities(self) -> int:
        return len(self.velocities)

    @property
    def min_gamma(self) -> float:
        """Smallest gamma keeping every exchange rate nonnegative."""
        return max(abs(_dot(e, v)) / 2.0 for e in UNIT_VECTORS for v in self.velocities)

    @cached_property
    def velocity_array(self) -> np.ndarray:
        return np.array(self.velocities, dtype=np.int64)

    @cached_property
    def conserved_table(self) -> np.ndarray:
        """I_a(v) for a = 0, 1, 2: rows are (1, v.e1, v.e2)."""
        table = np.ones((3, self.n_velocities), dtype=np.int64)
        table[1:] = self.velocity_array.T
        return table

    @cached_property
    def rate_table(self) -> np.ndarray:
        """p(e_k, v) indexed [direction k, velocity]."""
        return np.array(
            [[jump_rate(e, v, self.gamma) for v in self.velocities] for e in UNIT_VECTORS]
        )

    def opposite(self, index: int) -> int:
        v = self.velocities[index]
        return self.velocities.index((-v[0], -v[1]))

    def with_gamma(self, gamma: float) -> "VelocityModel":
        return replace(self, gamma=gamma)


@lru_cache()
def _load_presets() -> Dict[str, dict]:
    with open(PRESETS_PATH, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def available_presets() -> List[str]:
    return sorted(_load_presets())


def load_model(preset: str = "cube", gamma: float = 1.0) -> VelocityModel:
    """Build a VelocityModel from data/presets.yaml."""
    presets = _load_presets()
    if preset not in presets:
        raise ContractViolationError(
            f"Unknown preset '{preset}'", details=", ".join(sorted(presets))
        )
    entry = presets[preset]
    velocities = tuple(tuple(v) for v in entry["velocities"])
    rule = COLLISION_RULES[entry.get("collision_rule", "opposite_pairs")]
    return VelocityModel(
        velocities=velocities,
        collisions=rule(velocities),
        gamma=gamma,
        name=preset,
    )


@dataclass(frozen=True)
class Torus:
    """Periodic square lattice (Z/LZ)^2."""
    side: int

    def __post_init__(self):
        if int(self.side) < 4:
            raise ContractViolationError(f"Torus side must be >= 4, got {self.side}")
        object.__setattr__(self, "side", int(self.side))

    @property
    def n_sites(self) -> int:
        return self.side * self.side

    def wrap(self, x: Sequence[int]) -> Vector:
        return (int(x[0]) % self.side, int(x[1]) % self.side)

    def shift(self, x: Sequence[int], e: Sequence[int]) -> Vector:
        return self.wrap((x[0] + e[0], x[1] + e[1]))

    def site_index(self, x: Sequence[int]) -> int:
        x1, x2 = self.wrap(x)
        return x1 * self.side + x2

    def site_coords(self, index: int) -> Vector:
        return divmod(int(index), self.side)

    def sites(self) -> Iterator[Vector]:
        for x1 in range(self.side):
            for x2 in range(self.side):
                yield (x1, x2)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """Site index of x + e_k, indexed [site, direction k]."""
        table = np.empty((self.n_sites, len(UNIT_VECTORS)), dtype=np.int64)
        for i, x in enumerate(self.sites()):
            for k, e in enumerate(UNIT_VECTORS):
                table[i, k] = self.site_index((x[0] + e[0], x[1] + e[1]))
        return table


class Configuration:
    """Occupancy bits eta(x, v) on a torus, stored as a read-only (sites, velocities) array."""

    __slots__ = ("model", "torus", "occupancy")

    def __init__(self, model: VelocityModel, torus: Torus, occupancy: np.ndarray):
        occupancy = np.array(occupancy, dtype=np.uint8).reshape(torus.n_sites, model.n_velocities)
        if occupancy.size and occupancy.max() > 1:
            raise ContractViolationError("Occupancy bits must be 0 or 1")
        occupancy.setflags(write=False)
        self.model = model
        self.torus = torus
        self.occupancy = occupancy

    @classmethod
    def empty(cls, model: VelocityModel, torus: Torus) -> "Configuration":
        return cls(model, torus, np.zeros((torus.n_sites, model.n_velocities), dtype=np.uint8))

    @classmethod
    def full(cls, model: VelocityModel, torus: Torus) -> "Configuration":
        return cls(model, torus, np.ones((torus.n_sites, model.n_velocities), dtype=np.uint8))

    @classmethod
    def from_particles(
        cls,
        model: VelocityModel,
        torus: Torus,
        particles: Iterable[Tuple[Sequence[int], int]],
    ) -> "Configuration":
        occupancy = np.zeros((torus.n_sites, model.n_velocities), dtype=np.uint8)
        for x, v in particles:
            occupancy[torus.site_index(x), v] = 1
        return cls(model, torus, occupancy)

    def bit(self, x: Sequence[int], v: int) -> int:
        return int(self.occupancy[self.torus.site_index(x), v])

    def packed_planes(self) -> np.ndarray:
        """Bit-packed occupancy, one packed row per velocity plane."""
        return np.packbits(self.occupancy.T, axis=1)

    def to_bitstring(self) -> str:
        bits = "".join("1" if b else "0" for b in self.occupancy.ravel())
        return f"L={self.torus.side};V={self.model.n_velocities};{bits}"

    @classmethod
    def from_bitstring(cls, text: str, model: VelocityModel) -> "Configuration":
        try:
            side_part, vel_part, bits = text.strip().split(";")
            side = int(side_part.split("=")[1])
            n_velocities = int(vel_part.split("=")[1])
        except (ValueError, IndexError) as e:
            raise ContractViolationError("Malformed configuration bitstring", str(e))
        if n_velocities != model.n_velocities:
            raise ContractViolationError(
                f"Bitstring has {n_velocities} velocities, model has {model.n_velocities}"
            )
        torus = Torus(side)
        if len(bits) != torus.n_sites * n_velocities or set(bits) - {"0", "1"}:
            raise ContractViolationError("Bitstring length or alphabet does not match header")
        occupancy = np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0")
        return cls(model, torus, occupancy)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return (
            self.model == other.model
            and self.torus == other.torus
            and np.array_equal(self.occupancy, other.occupancy)
        )

    def __hash__(self) -> int:
        return hash((self.model, self.torus, self.occupancy.tobytes()))

    def __repr__(self) -> str:
        return (
            f"Configuration(preset={self.model.name!r}, L={self.torus.side}, "
            f"particles={int(self.occupancy.sum())})"
        )


@dataclass(frozen=True)
class Event:
    """One enabled transition: an exchange (x, e, v) or a collision (x, q)."""
    kind: Literal["exchange", "collision"]
    site: Vector
    rate: float
    direction: Optional[int] = None
    velocity: Optional[int] = None
    collision: Optional[int] = None


def _event_enabled(config: Configuration, event: Event) -> bool:
    occ = config.occupancy
    torus = config.torus
    x = torus.site_index(event.site)
    if event.kind == "exchange":
        if event.direction is None or event.velocity is None:
            return False
        y = int(torus.neighbor_table[x, event.direction])
        return bool(occ[x, event.velocity] == 1 and occ[y, event.velocity] == 0)
    if event.kind == "collision":
        if event.collision is None:
            return False
        v, w, vp, wp = config.model.collisions[event.collision]
        return bool(occ[x, v] and occ[x, w] and not occ[x, vp] and not occ[x, wp])
    return False


def enumerate_events(config: Configuration, model: Optional[VelocityModel] = None) -> List[Event]:
    """All enabled events, ordered by site, then exchanges before collisions."""
    model = model or config.model
    occ = config.occupancy
    torus = config.torus
    neighbors = torus.neighbor_table
    rates = model.rate_table
    events: List[Event] = []
    for x in range(torus.n_sites):
        coords = torus.site_coords(x)
        row = occ[x]
        if not row.any():
            continue
        for v in range(model.n_velocities):
            if not row[v]:
                continue
            for k in range(len(UNIT_VECTORS)):
                if occ[neighbors[x, k], v] == 0 and rates[k, v] > 0:
                    events.append(Event("exchange", coords, float(rates[k, v]), direction=k, velocity=v))
        for c, (v, w, vp, wp) in enumerate(model.collisions):
            if row[v] and row[w] and not row[vp] and not row[wp]:
                events.append(Event("collision", coords, 1.0, collision=c))
    return events


def apply_event(config: Configuration, event: Event) -> Configuration:
    """Apply an enabled event and return the new configuration."""
    if event.rate <= 0 or not _event_enabled(config, event):
        raise ContractViolationError(f"Event {event} is not enabled in {config!r}")
    occupancy = config.occupancy.copy()
    torus = config.torus
    x = torus.site_index(event.site)
    if event.kind == "exchange":
        y = int(torus.neighbor_table[x, event.direction])
        occupancy[x, event.velocity] = 0
        occupancy[y, event.velocity] = 1
    else:
        v, w, vp, wp = config.model.collisions[event.collision]
        occupancy[x, [v, w, vp, wp]] = occupancy[x, [vp, wp, v, w]]
    return Configuration(config.model, torus, occupancy)


def conserved_quantities(config: Configuration) -> Tuple[int, Tuple[int, int]]:
    """Total mass and momentum (sum of v.e_a over particles)."""
    counts = config.occupancy.sum(axis=0).astype(np.int64)
    mass = int(counts.sum())
    momentum = counts @ config.model.velocity_array
    return mass, (int(momentum[0]), int(momentum[1]))


def max_total_rate(model: VelocityModel, torus: Torus) -> float:
    """Upper bound |sites| |V| 2d max p + |sites| |Q| on the total event rate."""
    return (
        torus.n_sites * model.n_velocities * len(UNIT_VECTORS) * float(model.rate_table.max())
        + torus.n_sites * len(model.collisions)
    )
