"""Exact continuous-time simulation of the lattice gas.

The simulation keeps one total rate per site in a sum tree. An event is
drawn by descending the tree to a site and then scanning the handful of
events enabled there. After an event only the sites whose rates can change
are recomputed: the touched sites and their nearest neighbours.

The time of the next event is drawn once and held in ``pending_time``, so
splitting a run at an intermediate horizon reproduces the unsplit run.

Usage
-----
    state = SimState.start(config, seed=7, replica=0)
    evolve(state, 10.0, observers=[TrajectoryObserver(times, callback)])
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import get_settings
from app.core.exceptions import ContractViolationError
from app.schemas.model import ObservableSpec
from app.services.equilibrium_service import sample_configuration
from app.services.lattice_model import (
    UNIT_VECTORS,
    Configuration,
    Event,
    Torus,
    VelocityModel,
)
from app.services.local_functions import LocalFunction
from app.services.rng_streams import CounterStream, StreamState

logger = logging.getLogger(__name__)

Listener = Callable[[Event, "SimState"], None]


# ============================================================
# Rate catalog
# ============================================================

class RateCatalog:
    """Sum tree over per-site total rates.

    Parents always hold ``left + right`` of their current children, so an
    incrementally updated tree is bitwise equal to a fresh rebuild.
    """

    def __init__(self, n_leaves: int):
        size = 1
        while size < n_leaves:
            size *= 2
        self.n_leaves = n_leaves
        self.size = size
        self.tree: List[float] = [0.0] * (2 * size)

    @classmethod
    def from_rates(cls, rates: Sequence[float]) -> "RateCatalog":
        catalog = cls(len(rates))
        catalog.rebuild(rates)
        return catalog

    def rebuild(self, rates: Sequence[float]) -> None:
        tree = self.tree
        size = self.size
        for i in range(size):
            tree[size + i] = float(rates[i]) if i < self.n_leaves else 0.0
        for node in range(size - 1, 0, -1):
            tree[node] = tree[2 * node] + tree[2 * node + 1]

    def update(self, leaf: int, rate: float) -> None:
        tree = self.tree
        node = self.size + leaf
        tree[node] = float(rate)
        node //= 2
        while node:
            tree[node] = tree[2 * node] + tree[2 * node + 1]
            node //= 2

    def rate(self, leaf: int) -> float:
        return self.tree[self.size + leaf]

    @property
    def total(self) -> float:
        return self.tree[1]

    def find(self, target: float) -> Tuple[int, float]:
        """Leaf whose cumulative interval contains ``target`` and the offset inside it."""
        tree = self.tree
        node = 1
        while node < self.size:
            left = tree[2 * node]
            if target < left or tree[2 * node + 1] <= 0.0:
                node = 2 * node
            else:
                target -= left
                node = 2 * node + 1
        return node - self.size, target

    def leaves(self) -> List[float]:
        return self.tree[self.size:self.size + self.n_leaves]


@dataclass(frozen=True)
class _RateTables:
    """Python-list views of the model and torus used in the inner loop."""
    n_velocities: int
    n_directions: int
    neighbors: Tuple[Tuple[int, ...], ...]
    rates: Tuple[Tuple[float, ...], ...]
    collisions: Tuple[Tuple[int, int, int, int], ...]


@lru_cache(maxsize=32)
def _rate_tables(model: VelocityModel, torus: Torus) -> _RateTables:
    return _RateTables(
        n_velocities=model.n_velocities,
        n_directions=len(UNIT_VECTORS),
        neighbors=tuple(tuple(int(y) for y in row) for row in torus.neighbor_table),
        rates=tuple(tuple(float(r) for r in row) for row in model.rate_table),
        collisions=tuple(tuple(int(i) for i in q) for q in model.collisions),
    )


def _site_rate(tables: _RateTables, occupancy: bytearray, x: int) -> float:
    n_velocities = tables.n_velocities
    base = x * n_velocities
    total = 0.0
    neighbors = tables.neighbors[x]
    for v in range(n_velocities):
        if not occupancy[base + v]:
            continue
        for k in range(tables.n_directions):
            if not occupancy[neighbors[k] * n_velocities + v]:
                total += tables.rates[k][v]
    for v, w, vp, wp in tables.collisions:
        if (
            occupancy[base + v] and occupancy[base + w]
            and not occupancy[base + vp] and not occupancy[base + wp]
        ):
            total += 1.0
    return total


def _site_rates(tables: _RateTables, occupancy: bytearray, n_sites: int) -> List[float]:
    return [_site_rate(tables, occupancy, x) for x in range(n_sites)]


# ============================================================
# State
# ============================================================

@dataclass
class SimState:
    """Mutable simulation state for one replica.

    ``occupancy`` is a flat bytearray indexed ``site * n_velocities + v``.
    """
    model: VelocityModel
    torus: Torus
    occupancy: bytearray
    stream: CounterStream
    catalog: RateCatalog
    time: float = 0.0
    pending_time: Optional[float] = None
    incremental: bool = True
    events: int = 0

    @classmethod
    def start(
        cls,
        config: Configuration,
        seed: int,
        replica: int = 0,
        time: float = 0.0,
        incremental: bool = True,
        block_size: Optional[int] = None,
    ) -> "SimState":
        occupancy = bytearray(config.occupancy.reshape(-1).tobytes())
        tables = _rate_tables(config.model, config.torus)
        catalog = RateCatalog.from_rates(_site_rates(tables, occupancy, config.torus.n_sites))
        return cls(
            model=config.model,
            torus=config.torus,
            occupancy=occupancy,
            stream=CounterStream(seed, replica, block_size),
            catalog=catalog,
            time=float(time),
            incremental=incremental,
        )

    @property
    def tables(self) -> _RateTables:
        return _rate_tables(self.model, self.torus)

    @property
    def total_rate(self) -> float:
        return self.catalog.total

    @property
    def rng_state(self) -> StreamState:
        return self.stream.state

    def snapshot(self) -> Configuration:
        """Immutable copy of the current configuration."""
        occupancy = np.frombuffer(bytes(self.occupancy), dtype=np.uint8)
        return Configuration(self.model, self.torus, occupancy)

    def catalog_matches_rebuild(self) -> bool:
        """Compare the incremental catalog with a fresh full rebuild."""
        fresh = RateCatalog.from_rates(_site_rates(self.tables, self.occupancy, self.torus.n_sites))
        return fresh.tree == self.catalog.tree


# ============================================================
# Stepping
# ============================================================

def _next_event_time(state: SimState) -> float:
    if state.pending_time is None:
        rate = state.catalog.total
        if rate <= 0.0:
            return math.inf
        state.pending_time = state.time + state.stream.exponential(rate)
    return state.pending_time


def _select_event(state: SimState, x: int, offset: float) -> Tuple[Event, List[int]]:
    """Pick the event at site x whose cumulative rate interval contains ``offset``."""
    tables = state.tables
    occupancy = state.occupancy
    n_velocities = tables.n_velocities
    base = x * n_velocities
    neighbors = tables.neighbors[x]
    coords = state.torus.site_coords(x)
    candidates: List[Tuple[float, Event, List[int]]] = []

    for v in range(n_velocities):
        if not occupancy[base + v]:
            continue
        for k in range(tables.n_directions):
            y = neighbors[k]
            rate = tables.rates[k][v]
            if rate > 0.0 and not occupancy[y * n_velocities + v]:
                candidates.append((rate, Event("exchange", coords, rate, direction=k, velocity=v), [x, y]))
    for c, (v, w, vp, wp) in enumerate(tables.collisions):
        if (
            occupancy[base + v] and occupancy[base + w]
            and not occupancy[base + vp] and not occupancy[base + wp]
        ):
            candidates.append((1.0, Event("collision", coords, 1.0, collision=c), [x]))

    if not candidates:
        raise ContractViolationError(f"Catalog selected site {coords} with no enabled event")
    acc = 0.0
    for rate, event, touched in candidates:
        acc += rate
        if offset < acc:
            return event, touched
    # Rounding at the right edge of the site interval
    return candidates[-1][1], candidates[-1][2]


def _apply_in_place(state: SimState, event: Event, touched: List[int]) -> None:
    tables = state.tables
    occupancy = state.occupancy
    n_velocities = tables.n_velocities
    if event.kind == "exchange":
        x, y = touched
        occupancy[x * n_velocities + event.velocity] = 0
        occupancy[y * n_velocities + event.velocity] = 1
    else:
        base = touched[0] * n_velocities
        v, w, vp, wp = tables.collisions[event.collision]
        occupancy[base + v] = occupancy[base + w] = 0
        occupancy[base + vp] = occupancy[base + wp] = 1

    if not state.incremental:
        state.catalog.rebuild(_site_rates(tables, occupancy, state.torus.n_sites))
        return
    affected = set(touched)
    for site in touched:
        affected.update(tables.neighbors[site])
    for site in sorted(affected):
        state.catalog.update(site, _site_rate(tables, occupancy, site))


def step(state: SimState) -> Tuple[Optional[Event], float]:
    """Advance to the next event.

    Returns ``(None, inf)`` when every rate vanishes; the state is left as is.
    """
    next_time = _next_event_time(state)
    if math.isinf(next_time):
        return None, math.inf
    # Uniform on [0, R)
    target = (1.0 - state.stream.uniform()) * state.catalog.total
    x, offset = state.catalog.find(target)
    event, touched = _select_event(state, x, offset)
    _apply_in_place(state, event, touched)
    dt = next_time - state.time
    state.time = next_time
    state.pending_time = None
    state.events += 1
    return event, dt


# ============================================================
# Observers and listeners
# ============================================================

@dataclass
class TrajectoryObserver:
    """Fires ``callback(t_k, value)`` at each sample time.

    ``value`` is ``observable(snapshot)`` when an observable is given and the
    configuration snapshot otherwise. The cursor persists across evolve calls.
    """
    times: Sequence[float]
    callback: Callable[[float, Any], None]
    observable: Optional[Callable[[Configuration], Any]] = None
    cursor: int = 0

    def __post_init__(self):
        self.times = [float(t) for t in self.times]
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ContractViolationError("Observer times must be strictly increasing")

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.times)

    def fire_until(self, state: SimState, limit: float, inclusive: bool) -> None:
        snapshot = None
        while self.cursor < len(self.times):
            t = self.times[self.cursor]
            if t > limit or (t == limit and not inclusive):
                break
            self.cursor += 1
            # Times already in the past when the observer joined are skipped
            if t < state.time:
                continue
            if snapshot is None:
                snapshot = state.snapshot()
            self.callback(t, self.observable(snapshot) if self.observable else snapshot)


class CurrentIntegrator:
    """Integrated current J(t) = sum over jumps of (r . I(v)) (theta . e).

    Collisions move nothing between sites and contribute zero.
    """

    def __init__(self, model: VelocityModel, spec: ObservableSpec):
        table = model.conserved_table.astype(np.float64)
        charge = np.asarray(spec.r, dtype=np.float64) @ table
        projection = [
            spec.theta[0] * e[0] + spec.theta[1] * e[1] for e in UNIT_VECTORS
        ]
        self._weights = [[float(charge[v]) * projection[k] for v in range(model.n_velocities)]
                         for k in range(len(UNIT_VECTORS))]
        self.value = 0.0

    def __call__(self, event: Event, state: SimState) -> None:
        if event.kind == "exchange":
            self.value += self._weights[event.direction][event.velocity]


class FieldSum:
    """Normalized field sum sum_x (tau_x f)(eta) / L of a local function.

    Translation tables are precomputed once so evaluation is a single gather.
    """

    def __init__(self, f: LocalFunction):
        self.function = f
        torus = f.torus
        n_velocities = f.model.n_velocities
        codes = np.asarray(f.bits, dtype=np.int64)
        sites = codes // n_velocities
        velocities = codes % n_velocities
        x1, x2 = sites // torus.side, sites % torus.side
        shifts = np.arange(torus.n_sites, dtype=np.int64)
        z1, z2 = shifts // torus.side, shifts % torus.side
        moved = ((x1[None, :] + z1[:, None]) % torus.side) * torus.side + (x2[None, :] + z2[:, None]) % torus.side
        self._table = moved * n_velocities + velocities[None, :]
        self._weights = np.left_shift(1, np.arange(codes.size, dtype=np.int64))
        self._norm = math.sqrt(torus.n_sites)

    def _check(self, config: Configuration) -> None:
        if config.torus != self.function.torus or config.model.n_velocities != self.function.model.n_velocities:
            raise ContractViolationError(
                "Field sum evaluated on a torus or velocity set other than the one it was built for"
            )

    def values(self, flat: np.ndarray) -> np.ndarray:
        """Per-translation values (tau_z f)(eta) for a flat occupancy array."""
        if self._table.shape[1] == 0:
            return np.full(self._table.shape[0], self.function.values[0])
        index = flat[self._table].astype(np.int64) @ self._weights
        return self.function.values[index]

    def evaluate_flat(self, flat: np.ndarray) -> float:
        return float(self.values(flat).sum() / self._norm)

    def __call__(self, config: Configuration) -> float:
        self._check(config)
        return self.evaluate_flat(config.occupancy.reshape(-1))


def mass_observable(config: Configuration) -> float:
    return float(config.occupancy.sum())


def momentum_observable(axis: int) -> Callable[[Configuration], float]:
    def observable(config: Configuration) -> float:
        counts = config.occupancy.sum(axis=0).astype(np.int64)
        return float(counts @ config.model.velocity_array[:, axis])
    return observable


def density_observable(config: Configuration) -> float:
    """Particles per site."""
    return float(config.occupancy.sum()) / config.torus.n_sites


# ============================================================
# Evolution
# ============================================================

def evolve(
    state: SimState,
    horizon: float,
    observers: Sequence[TrajectoryObserver] = (),
    listeners: Sequence[Listener] = (),
) -> SimState:
    """Run events up to ``horizon``, sampling observers on the piecewise-constant path."""
    if horizon < state.time:
        raise ContractViolationError(f"Horizon {horizon} precedes current time {state.time}")

    while True:
        next_time = _next_event_time(state)
        limit = min(next_time, horizon)
        for observer in observers:
            # Sample times equal to the horizon fire on the final configuration
            observer.fire_until(state, limit, inclusive=next_time > horizon)
        if next_time > horizon:
            state.time = float(horizon)
            break
        event, _ = step(state)
        for listener in listeners:
            listener(event, state)
    return state


# ============================================================
# Ensembles
# ============================================================

@dataclass
class ReplicaTask:
    """Everything one worker needs to run a single replica."""
    model: VelocityModel
    torus: Torus
    lam: List[float]
    seed: int
    replica: int
    times: List[float]
    observables: Dict[str, LocalFunction] = field(default_factory=dict)
    spec: Optional[ObservableSpec] = None
    incremental: bool = True


@dataclass
class ReplicaSummary:
    replica: int
    samples: Dict[str, List[float]]
    currents: List[float]
    events: int
    final_time: float
    rng_counter: int


@dataclass
class EnsembleResult:
    """Per-replica samples stacked in replica order."""
    times: np.ndarray
    samples: Dict[str, np.ndarray]
    currents: Optional[np.ndarray]
    events: np.ndarray

    @property
    def replicas(self) -> int:
        return int(self.events.size)


def _run_replica(task: ReplicaTask) -> ReplicaSummary:
    config = sample_configuration(task.lam, task.torus, task.seed, task.model, task.replica)
    state = SimState.start(config, task.seed, task.replica, incremental=task.incremental)
    sums = {name: FieldSum(f) for name, f in task.observables.items()}
    samples: Dict[str, List[float]] = {name: [] for name in sums}
    currents: List[float] = []
    integrator = CurrentIntegrator(task.model, task.spec) if task.spec is not None else None

    def record(t: float, snapshot: Configuration) -> None:
        flat = snapshot.occupancy.reshape(-1)
        for name, field_sum in sums.items():
            samples[name].append(field_sum.evaluate_flat(flat))
        if integrator is not None:
            currents.append(integrator.value)

    listeners = [integrator] if integrator is not None else []
    evolve(state, task.times[-1], [TrajectoryObserver(task.times, record)], listeners)
    return ReplicaSummary(
        replica=task.replica,
        samples=samples,
        currents=currents,
        events=state.events,
        final_time=state.time,
        rng_counter=state.stream.counter,
    )


def run_ensemble(
    model: VelocityModel,
    torus: Torus,
    lam: Sequence[float],
    times: Sequence[float],
    seed: int,
    replicas: int,
    observables: Optional[Dict[str, LocalFunction]] = None,
    spec: Optional[ObservableSpec] = None,
    workers: Optional[int] = None,
    incremental: bool = True,
) -> EnsembleResult:
    """Run independent replicas from product-measure starts and stack their samples.

    Replica r uses the (seed, r) streams, so results do not depend on ``workers``.
    """
    times = [float(t) for t in times]
    if not times or times[0] < 0:
        raise ContractViolationError("Sample times must be nonempty and nonnegative")
    workers = workers or get_settings().worker_threads
    tasks = [
        ReplicaTask(
            model=model,
            torus=torus,
            lam=[float(x) for x in lam],
            seed=seed,
            replica=r,
            times=times,
            observables=dict(observables or {}),
            spec=spec,
            incremental=incremental,
        )
        for r in range(replicas)
    ]
    logger.info(
        f"Running {replicas} replicas on L={torus.side} ({model.name}) to T={times[-1]} "
        f"with {workers} worker(s)"
    )
    if workers > 1 and replicas > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_replica, tasks))
    else:
        summaries = [_run_replica(task) for task in tasks]
    summaries.sort(key=lambda s: s.replica)

    names = list((observables or {}).keys())
    samples = {
        name: np.array([s.samples[name] for s in summaries], dtype=np.float64).reshape(replicas, len(times))
        for name in names
    }
    currents = None
    if spec is not None:
        currents = np.array([s.currents for s in summaries], dtype=np.float64).reshape(replicas, len(times))
    events = np.array([s.events for s in summaries], dtype=np.int64)
    logger.info(f"Ensemble finished: {int(events.sum())} events in total")
    return EnsembleResult(
        times=np.array(times),
        samples=samples,
        currents=currents,
        events=events,
    )
