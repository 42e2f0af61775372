"""Benchmark metric suite for learned vector fields.

Implements the reproduction-accuracy, stability, and timing metrics used by
the handwriting-imitation comparison tables, plus the dynamic-time-warping
distance those tables rely on.  Reports render as JSON and as a fixed-width
text table with the conventional row names.

Units follow the data: handwriting datasets are treated as millimeters, so
the default goal radius of 1.0 means "1 mm ball around the goal".  Reports
embed every protocol parameter (grid size, horizons, radius, seed) so a
number is never quoted without its context.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from statistics import median
from typing import Callable, Sequence

import numpy as np

from cvfields.data import Demonstration
from cvfields.dynsys import SimTrajectory, integrate_field
from cvfields.polyalg import PolyMap

__all__ = [
    "BenchmarkConfig",
    "BenchmarkReport",
    "GoalMetrics",
    "GridMetrics",
    "TimingMetrics",
    "dtw",
    "goal_metrics",
    "grid_metrics",
    "replay_demos",
    "run_benchmark",
    "split_demos",
    "timing",
    "trajectory_error",
    "velocity_error",
]


def _field_of(obj) -> PolyMap:
    if isinstance(obj, PolyMap):
        return obj
    inner = getattr(obj, "field", None)
    if isinstance(inner, PolyMap):
        return inner
    raise TypeError(f"expected a PolyMap or a fitted model, got {type(obj).__name__}")


# ---------------------------------------------------------------------------
# dynamic time warping


def dtw(seq_a, seq_b) -> float:
    """Dynamic-time-warping distance with Euclidean pointwise cost.

    Classic alignment DP: steps are match / insert / delete, no window, both
    endpoint pairs matched.  Not a metric (no triangle inequality), but it is
    symmetric and zero on identical sequences.
    """
    a = _as_sequence(seq_a, "seq_a")
    b = _as_sequence(seq_b, "seq_b")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sequences must share the same state dimension")
    diff = a[:, None, :] - b[None, :, :]
    cost = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    na, nb = cost.shape
    D = np.full((na + 1, nb + 1), np.inf)
    D[0, 0] = 0.0
    # anti-diagonal sweep: every predecessor lives on an earlier diagonal
    for d in range(2, na + nb + 1):
        i = np.arange(max(1, d - nb), min(na, d - 1) + 1)
        j = d - i
        best = np.minimum(D[i - 1, j], np.minimum(D[i, j - 1], D[i - 1, j - 1]))
        D[i, j] = cost[i - 1, j - 1] + best
    return float(D[na, nb])


def _as_sequence(seq, name: str) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (m, n) sequence")
    return arr


# ---------------------------------------------------------------------------
# reproduction accuracy


def replay_demos(field, demos: Sequence[Demonstration], dt: float | None = None) -> list[SimTrajectory]:
    """Integrate the field from each demo's initial state for its duration."""
    f = _field_of(field)
    return [integrate_field(f, d.positions[0], d.horizon, dt=dt) for d in demos]


def _sample_states(sim: SimTrajectory, ts: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(ts, sim.t, sim.states[:, k]) for k in range(sim.states.shape[1])])


def _sample_velocities(sim: SimTrajectory, ts: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(ts, sim.t, sim.velocities[:, k]) for k in range(sim.velocities.shape[1])])


def trajectory_error(replays: Sequence[SimTrajectory], demos: Sequence[Demonstration]) -> float:
    """Mean over demos of the time-averaged pointwise replay distance.

    Replays are sampled at the demo timestamps by linear interpolation on the
    simulation grid, so the value is invariant under refining the simulation
    step below the demo sampling rate (up to interpolation error).
    """
    _check_paired(replays, demos)
    per_demo = []
    for sim, demo in zip(replays, demos):
        ts = demo.t - demo.t[0]
        err = _sample_states(sim, ts) - demo.positions
        per_demo.append(float(np.mean(np.linalg.norm(err, axis=1))))
    return float(np.mean(per_demo))


def velocity_error(replays: Sequence[SimTrajectory], demos: Sequence[Demonstration]) -> float:
    """Same time-averaged statistic on velocities; demos must carry them."""
    _check_paired(replays, demos)
    per_demo = []
    for sim, demo in zip(replays, demos):
        if demo.velocities is None:
            raise ValueError("velocity_error needs demonstrations with velocities")
        ts = demo.t - demo.t[0]
        err = _sample_velocities(sim, ts) - demo.velocities
        per_demo.append(float(np.mean(np.linalg.norm(err, axis=1))))
    return float(np.mean(per_demo))


def _check_paired(replays, demos) -> None:
    if len(demos) == 0:
        raise ValueError("empty demonstration set")
    if len(replays) != len(demos):
        raise ValueError("one replay per demonstration required")


# ---------------------------------------------------------------------------
# goal reaching and grid stability


@dataclass(frozen=True)
class GoalMetrics:
    """Per-demo goal statistics over the long (multiple x T) horizon."""

    distance_to_goal: float
    duration_to_goal: float | None
    reached: int
    total: int


@dataclass(frozen=True)
class GridMetrics:
    """Stability statistics from seeded starts enclosing the demos."""

    duration: float | None
    fraction_reached: float
    distance_to_goal: float
    dtwd: float
    starts: np.ndarray


def _batch_rk4_entry(f, starts, horizon: float, dt: float, goal, radius: float,
                     record_stride: int):
    """Integrate a batch of starts, freezing each row at its goal entry.

    Returns (entry_times, finals, paths).  entry_times holds nan for rows
    that never entered the radius ball; rows that go nonfinite freeze at
    their last finite state.  The whole batch stops once every row froze.
    """
    X = np.array(starts, dtype=float)
    m = X.shape[0]
    n_steps = max(1, int(round(horizon / dt)))
    dt = horizon / n_steps
    goal = np.asarray(goal, dtype=float)
    entry = np.full(m, np.nan)
    active = np.ones(m, dtype=bool)
    paths: list[list[np.ndarray]] = [[X[r].copy()] for r in range(m)]
    hit0 = np.linalg.norm(X - goal, axis=1) <= radius
    entry[hit0] = 0.0
    active[hit0] = False
    for step in range(n_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Y = X[idx]
        k1 = f(Y)
        k2 = f(Y + (0.5 * dt) * k1)
        k3 = f(Y + (0.5 * dt) * k2)
        k4 = f(Y + dt * k3)
        Ynew = Y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t_now = (step + 1) * dt
        finite = np.isfinite(Ynew).all(axis=1)
        dist = np.linalg.norm(Ynew - goal, axis=1)
        on_grid = (step + 1) % record_stride == 0
        for local, row in enumerate(idx):
            if not finite[local]:
                active[row] = False  # freeze at last finite state
                continue
            X[row] = Ynew[local]
            froze = dist[local] <= radius
            if froze:
                entry[row] = t_now
                active[row] = False
            if on_grid or froze:
                paths[row].append(X[row].copy())
    for row in range(m):
        if not np.array_equal(paths[row][-1], X[row]):
            paths[row].append(X[row].copy())
    return entry, X, [np.array(p) for p in paths]


def goal_metrics(field, demos: Sequence[Demonstration], *, goal=None, radius: float = 1.0,
                 horizon_multiple: float = 30.0, dt: float | None = None,
                 replays: Sequence[SimTrajectory] | None = None) -> GoalMetrics:
    """Final-distance plus long-horizon goal entry statistics.

    Distance to goal is measured at the end of each demo-duration replay.
    Entry times come from separate runs over `horizon_multiple` times each
    demo's duration; a demo counts as reached only if the state enters the
    goal ball within its own extended deadline.
    """
    if len(demos) == 0:
        raise ValueError("empty demonstration set")
    f = _field_of(field)
    n = demos[0].dimension
    goal = np.zeros(n) if goal is None else np.asarray(goal, dtype=float)
    if replays is None:
        replays = replay_demos(f, demos)
    finals = np.array([sim.states[-1] for sim in replays])
    distance = float(np.mean(np.linalg.norm(finals - goal, axis=1)))

    horizons = np.array([d.horizon for d in demos], dtype=float)
    if dt is None:
        dt = float(horizons.min()) / 2000.0
    starts = np.array([d.positions[0] for d in demos])
    # stride beyond any step count: entry runs keep no paths
    entry, _, _ = _batch_rk4_entry(f, starts, horizon_multiple * float(horizons.max()),
                                   dt, goal, radius, record_stride=10 ** 9)
    deadlines = horizon_multiple * horizons
    ok = np.isfinite(entry) & (entry <= deadlines)
    duration = float(entry[ok].mean()) if ok.any() else None
    return GoalMetrics(distance, duration, int(ok.sum()), len(demos))


def grid_metrics(field, demos: Sequence[Demonstration], *, goal=None, radius: float = 1.0,
                 horizon_multiple: float = 30.0, grid_points: int = 16,
                 bbox_inflation: float = 0.25, seed: int = 0,
                 dt: float | None = None, dtw_cap: int = 4000) -> GridMetrics:
    """Stability metrics from seeded uniform starts in the inflated demo box.

    "Random positions on a grid" is read as a seeded uniform sample over the
    demo bounding box inflated by `bbox_inflation`; the seed is part of the
    protocol and travels with the report.  DTW distances compare each start's
    path (recorded near the demo sampling rate, truncated at goal entry) to
    its nearest demonstration.
    """
    if len(demos) == 0:
        raise ValueError("empty demonstration set")
    f = _field_of(field)
    n = demos[0].dimension
    goal = np.zeros(n) if goal is None else np.asarray(goal, dtype=float)
    allpos = np.vstack([d.positions for d in demos])
    lo, hi = allpos.min(axis=0), allpos.max(axis=0)
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    half = half * (1.0 + bbox_inflation)
    rng = np.random.default_rng(seed)
    starts = center + (2.0 * rng.random((grid_points, n)) - 1.0) * half

    horizons = np.array([d.horizon for d in demos], dtype=float)
    horizon = horizon_multiple * float(horizons.max())
    if dt is None:
        dt = float(horizons.min()) / 2000.0
    demo_dt = float(np.median(np.concatenate([np.diff(d.t) for d in demos])))
    stride = max(1, int(round(demo_dt / dt)))

    entry, finals, paths = _batch_rk4_entry(f, starts, horizon, dt, goal, radius, stride)
    reached = np.isfinite(entry)
    duration = float(entry[reached].mean()) if reached.any() else None
    distance = float(np.mean(np.linalg.norm(finals - goal, axis=1)))
    dtwds = []
    for path in paths:
        if len(path) > dtw_cap:
            path = path[:: int(np.ceil(len(path) / dtw_cap))]
        dtwds.append(min(dtw(path, d.positions) for d in demos))
    return GridMetrics(duration, float(reached.mean()), distance, float(np.mean(dtwds)), starts)


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class TimingMetrics:
    training_time: float | None
    integration_speed: float


def timing(field, demo: Demonstration, *, train: Callable[[], object] | None = None,
           runs: int = 5, dt: float | None = None) -> TimingMetrics:
    """Median wall-clock seconds for training and for one replay.

    `train` re-runs the full fit per repetition; for expensive fits measure
    once outside and hand the number to `run_benchmark` instead.
    """
    f = _field_of(field)
    t_train = None
    if train is not None:
        samples = []
        for _ in range(runs):
            tic = time.perf_counter()
            train()
            samples.append(time.perf_counter() - tic)
        t_train = float(median(samples))
    samples = []
    for _ in range(runs):
        tic = time.perf_counter()
        integrate_field(f, demo.positions[0], demo.horizon, dt=dt)
        samples.append(time.perf_counter() - tic)
    return TimingMetrics(t_train, float(median(samples)))


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class BenchmarkConfig:
    """Protocol parameters; every reported number is relative to these."""

    grid_points: int = 16
    horizon_multiple: float = 30.0
    goal_radius: float = 1.0  # data units; handwriting sets are read as mm
    bbox_inflation: float = 0.25
    seed: int = 0
    timing_runs: int = 5
    replay_dt: float | None = None
    entry_dt: float | None = None
    dtw_cap: int = 4000

    def __post_init__(self):
        if self.grid_points < 1 or self.horizon_multiple <= 0 or self.goal_radius <= 0:
            raise ValueError("grid_points, horizon_multiple, goal_radius must be positive")


@dataclass(frozen=True)
class BenchmarkReport:
    training_trajectory_error: float
    training_velocity_error: float | None
    test_trajectory_error: float | None
    test_velocity_error: float | None
    distance_to_goal: float
    duration_to_goal: float | None
    number_reached_goal: tuple[int, int]
    grid_duration: float | None
    grid_fraction_reached_goal: float
    grid_distance_to_goal: float
    grid_dtwd: float
    training_time: float | None
    integration_speed: float
    config: BenchmarkConfig = dc_field(default_factory=BenchmarkConfig)

    def as_dict(self) -> dict:
        k, m = self.number_reached_goal
        return {
            "TrainingTrajectoryError": self.training_trajectory_error,
            "TrainingVelocityError": self.training_velocity_error,
            "TestTrajectoryError": self.test_trajectory_error,
            "TestVelocityError": self.test_velocity_error,
            "DistanceToGoal": self.distance_to_goal,
            "DurationToGoal": self.duration_to_goal,
            "NumberReachedGoal": f"{k}/{m}",
            "GridDuration": self.grid_duration,
            "GridFractionReachedGoal": self.grid_fraction_reached_goal,
            "GridDistanceToGoal": self.grid_distance_to_goal,
            "GridDTWD": self.grid_dtwd,
            "TrainingTime": self.training_time,
            "IntegrationSpeed": self.integration_speed,
            "config": {
                "grid_points": self.config.grid_points,
                "horizon_multiple": self.config.horizon_multiple,
                "goal_radius": self.config.goal_radius,
                "bbox_inflation": self.config.bbox_inflation,
                "seed": self.config.seed,
                "timing_runs": self.config.timing_runs,
                "units": "millimeters assumed for handwriting data",
            },
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent)

    def to_text(self) -> str:
        k, m = self.number_reached_goal
        sections = [
            ("Reproduction Accuracy", [
                ("TrainingTrajectoryError", _fmt(self.training_trajectory_error)),
                ("TrainingVelocityError", _fmt(self.training_velocity_error)),
                ("TestTrajectoryError", _fmt(self.test_trajectory_error)),
                ("TestVelocityError", _fmt(self.test_velocity_error)),
            ]),
            ("Stability", [
                ("DistanceToGoal", _fmt(self.distance_to_goal)),
                ("DurationToGoal", _fmt(self.duration_to_goal)),
                ("NumberReachedGoal", f"{k}/{m}"),
                ("GridDuration (sec)", _fmt(self.grid_duration)),
                ("GridFractionReachedGoal", f"{100.0 * self.grid_fraction_reached_goal:g}%"),
                ("GridDistanceToGoal", _fmt(self.grid_distance_to_goal)),
                ("GridDTWD (x10^4)", _fmt(self.grid_dtwd / 1e4)),
            ]),
            ("Training and Integration Speed (in seconds)", [
                ("TrainingTime", _fmt(self.training_time)),
                ("IntegrationSpeed", _fmt(self.integration_speed)),
            ]),
        ]
        width = max(len(name) for _, rows in sections for name, _ in rows)
        lines = []
        for title, rows in sections:
            lines.append(f"-- {title} --")
            for name, value in rows:
                lines.append(f"{name:<{width}}  {value}")
        lines.append(f"(grid={self.config.grid_points}, horizon x{self.config.horizon_multiple:g}, "
                     f"radius={self.config.goal_radius:g}, seed={self.config.seed})")
        return "\n".join(lines)


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.4g}"


def split_demos(demos: Sequence[Demonstration], train_count: int = 4):
    """First `train_count` demos train, the rest test."""
    if len(demos) <= train_count:
        raise ValueError(f"need more than {train_count} demos to split")
    return list(demos[:train_count]), list(demos[train_count:])


def run_benchmark(field, train_demos: Sequence[Demonstration],
                  test_demos: Sequence[Demonstration] = (), *, goal=None,
                  config: BenchmarkConfig | None = None,
                  train: Callable[[], object] | None = None,
                  training_time: float | None = None) -> BenchmarkReport:
    """Full protocol: reproduction errors, goal statistics, grid stability, timing.

    Goal and grid statistics pool train and test demos (the tables report a
    single column over all demonstrations).  `training_time` records an
    externally measured fit time; `train` instead re-fits `timing_runs` times.
    """
    cfg = config or BenchmarkConfig()
    if len(train_demos) == 0:
        raise ValueError("empty demonstration set")
    f = _field_of(field)
    demos = list(train_demos) + list(test_demos)

    train_replays = replay_demos(f, train_demos, dt=cfg.replay_dt)
    tr_err = trajectory_error(train_replays, train_demos)
    tr_vel = None
    if all(d.velocities is not None for d in train_demos):
        tr_vel = velocity_error(train_replays, train_demos)
    te_err = te_vel = None
    if len(test_demos) > 0:
        test_replays = replay_demos(f, test_demos, dt=cfg.replay_dt)
        te_err = trajectory_error(test_replays, test_demos)
        if all(d.velocities is not None for d in test_demos):
            te_vel = velocity_error(test_replays, test_demos)

    all_replays = train_replays + (test_replays if len(test_demos) > 0 else [])
    gm = goal_metrics(f, demos, goal=goal, radius=cfg.goal_radius,
                      horizon_multiple=cfg.horizon_multiple, dt=cfg.entry_dt,
                      replays=all_replays)
    gr = grid_metrics(f, demos, goal=goal, radius=cfg.goal_radius,
                      horizon_multiple=cfg.horizon_multiple, grid_points=cfg.grid_points,
                      bbox_inflation=cfg.bbox_inflation, seed=cfg.seed,
                      dt=cfg.entry_dt, dtw_cap=cfg.dtw_cap)
    tm = timing(f, train_demos[0], train=train, runs=cfg.timing_runs, dt=cfg.replay_dt)
    t_train = training_time if training_time is not None else tm.training_time

    return BenchmarkReport(
        training_trajectory_error=tr_err,
        training_velocity_error=tr_vel,
        test_trajectory_error=te_err,
        test_velocity_error=te_vel,
        distance_to_goal=gm.distance_to_goal,
        duration_to_goal=gm.duration_to_goal,
        number_reached_goal=(gm.reached, gm.total),
        grid_duration=gr.duration,
        grid_fraction_reached_goal=gr.fraction_reached,
        grid_distance_to_goal=gr.distance_to_goal,
        grid_dtwd=gr.dtwd,
        training_time=t_train,
        integration_speed=tm.integration_speed,
        config=cfg,
    )
