"""Simulate learned fields and verify their contraction behavior.

Integration is classical fixed-step RK4: deterministic, so benchmark numbers
reproduce bit-for-bit across runs. The verification half evaluates the
contraction residual

    lambda_max(sym[M(x) Jf(x)] + Mdot(x) + tau M(x)),   sym[A] = A + A^T,

pointwise, and estimates the radius of the tube around a nominal curve inside
which tau/2-contraction persists: eps = tau c / (2 n K) with c the smallest
metric eigenvalue and K a sampled bound on the entrywise gradient norms of
the residual matrix. The sampling makes eps an estimate, not a certificate.

Obstacle avoidance modulates a field additively with a repulsive sum over
obstacle points, f~(t, x) = f(x) + alpha sum_j (x - j) / |x - j|^r, clamped
near the singularity. Obstacle positions arrive as timestamped snapshots
(one writer, atomic reference swap), so concurrent integrators always see a
consistent set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cvfields.data import Demonstration
from cvfields.learner import MetricField, contraction_residual_batch
from cvfields.polyalg import PolyMap, PolyTrajectory

__all__ = [
    "SimTrajectory",
    "ObstacleField",
    "ModulatedField",
    "TubeEstimate",
    "SequentialField",
    "integrate_field",
    "compose_sequential",
    "contraction_residual",
    "tube_radius",
    "modulate",
    "calibrate_alpha",
    "read_obstacle_stream",
    "write_obstacle_stream",
]

_TERMINATIONS = ("horizon", "stop-threshold", "domain-exit")


@dataclass(frozen=True)
class SimTrajectory:
    """One simulated rollout on a uniform time grid.

    termination says why stepping ended: the horizon was exhausted, the
    speed dropped to the stop threshold, or the state left the configured
    domain (nonfinite states count as leaving; note carries diagnostics).
    """

    dt: float
    t: np.ndarray
    states: np.ndarray
    velocities: np.ndarray | None
    termination: str
    switches: tuple[float, ...] = ()
    note: str = ""

    def __post_init__(self):
        if self.termination not in _TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or len(t) == 0:
            raise ValueError("time grid must be a nonempty 1-d array")
        if len(t) > 1:
            steps = np.diff(t)
            if np.any(steps <= 0):
                raise ValueError("time grid must be strictly increasing")
            if not np.allclose(steps, self.dt, rtol=1e-9, atol=1e-12):
                raise ValueError("time grid must be uniform with step dt")
        if len(self.states) != len(t):
            raise ValueError("states and time grid length mismatch")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def to_demonstration(self) -> Demonstration:
        """View as a Demonstration, e.g. for trajectory CSV output."""
        return Demonstration(self.t, self.states, self.velocities)


def _time_varying(f):
    return bool(getattr(f, "time_dependent", False))


def _in_domain(x: np.ndarray, domain) -> bool:
    if not np.all(np.isfinite(x)):
        return False
    if domain is None:
        return True
    return bool(np.all(x >= domain[:, 0]) and np.all(x <= domain[:, 1]))


def _integrate_stages(fields, x0, horizon, dt, threshold, domain):
    """Shared RK4 core: step the active stage, switching on slow speed."""
    x = np.asarray(x0, dtype=float).copy()
    if domain is not None:
        domain = np.asarray(domain, dtype=float)
    if dt is None:
        dt = horizon / 5000.0
    n_steps = max(1, int(round(horizon / dt)))
    dt = horizon / n_steps  # keep the grid uniform over the full horizon

    fns = [f if _time_varying(f) else (lambda t, y, f=f: f(y)) for f in fields]
    stage = 0
    switches: list[float] = []
    ts = [0.0]
    xs = [x.copy()]
    vs = []
    termination = "horizon"
    note = ""
    t = 0.0
    for _ in range(n_steps):
        fx = np.asarray(fns[stage](t, x), dtype=float)
        # switch (or stop) at step boundaries when the stage goes quiet
        while float(np.linalg.norm(fx)) <= threshold:
            if stage + 1 < len(fns):
                stage += 1
                switches.append(t)
                fx = np.asarray(fns[stage](t, x), dtype=float)
            else:
                vs.append(fx)
                return SimTrajectory(
                    dt, np.array(ts), np.array(xs), np.array(vs),
                    "stop-threshold", tuple(switches), note,
                )
        vs.append(fx)
        k1 = fx
        k2 = np.asarray(fns[stage](t + 0.5 * dt, x + 0.5 * dt * k1), dtype=float)
        k3 = np.asarray(fns[stage](t + 0.5 * dt, x + 0.5 * dt * k2), dtype=float)
        k4 = np.asarray(fns[stage](t + dt, x + dt * k3), dtype=float)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += dt
        if not _in_domain(x, domain):
            termination = "domain-exit"
            if not np.all(np.isfinite(x)):
                note = f"nonfinite state after t={t - dt:.6g}"
            else:
                ts.append(t)
                xs.append(x.copy())
                vs.append(np.asarray(fns[stage](t, x), dtype=float))
            break
        ts.append(t)
        xs.append(x.copy())
    else:
        vs.append(np.asarray(fns[stage](t, x), dtype=float))
    return SimTrajectory(
        dt, np.array(ts), np.array(xs), np.array(vs),
        termination, tuple(switches), note,
    )


def integrate_field(
    f,
    x0,
    horizon: float,
    dt: float | None = None,
    stop_threshold: float = 0.0,
    domain=None,
) -> SimTrajectory:
    """Integrate xdot = f(x) from x0 with fixed-step RK4.

    dt defaults to horizon / 5000 and is rounded so it divides the horizon
    evenly. Stepping stops early when |f(x)| <= stop_threshold or when the
    state leaves `domain` (an (n, 2) box of per-axis bounds); a nonfinite
    state is treated as a domain exit and noted. Time-varying fields (those
    with a true `time_dependent` attribute, like ModulatedField) are called
    as f(t, x).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if dt is not None and (dt <= 0 or dt > horizon):
        raise ValueError("dt must satisfy 0 < dt <= horizon")
    return _integrate_stages((f,), x0, horizon, dt, stop_threshold, domain)


@dataclass(frozen=True)
class SequentialField:
    """Executor that runs each field until it slows, then hands over.

    Mirrors sequential task execution: integrate the current field until
    |f(x)| drops to the switch threshold, then continue the same rollout
    with the next field. Switch times are recorded on the trajectory; if
    the final field never slows down the rollout ends flagged `horizon`.
    """

    fields: tuple
    threshold: float = 0.01

    def __post_init__(self):
        if not self.fields:
            raise ValueError("need at least one field")
        if self.threshold <= 0:
            raise ValueError("switch threshold must be positive")
        dims = {getattr(f, "dimension", None) for f in self.fields}
        dims.discard(None)
        if len(dims) > 1:
            raise ValueError(f"fields disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "fields", tuple(self.fields))

    def run(self, x0, horizon: float, dt: float | None = None, domain=None) -> SimTrajectory:
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        return _integrate_stages(self.fields, x0, horizon, dt, self.threshold, domain)


def compose_sequential(fields, threshold: float = 0.01) -> SequentialField:
    """Chain fields into one executor; see SequentialField."""
    return SequentialField(tuple(fields), threshold)


def _as_polymap(f) -> PolyMap:
    inner = getattr(f, "field", None)
    if isinstance(inner, PolyMap):
        return inner
    if isinstance(f, PolyMap):
        return f
    raise TypeError("need a PolyMap or a fitted model exposing .field")


def contraction_residual(f, metric: MetricField | None, tau: float, x):
    """lambda_max(sym[M Jf] + Mdot + tau M) at x; <= 0 certifies the point.

    x may be one point (returns a float) or an (m, n) batch (returns (m,)).
    metric None means the identity.
    """
    fmap = _as_polymap(f)
    if metric is None:
        metric = MetricField.identity(fmap.dimension)
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    res = contraction_residual_batch(fmap, metric, tau, np.atleast_2d(pts))
    return float(res[0]) if single else res


@dataclass(frozen=True)
class TubeEstimate:
    """Sampled lower-bound estimate of the contraction tube radius.

    epsilon = tau c / (2 n K); when the residual matrix is constant (K = 0)
    the whole sampled region qualifies and epsilon is reported infinite.
    """

    epsilon: float
    tau: float
    c: float
    K: float
    omega: np.ndarray

    @property
    def region_bounded(self) -> bool:
        return self.K == 0.0

    def clipped(self, cap: float) -> float:
        """epsilon clipped to a finite cap, convenient for experiments."""
        return float(min(self.epsilon, cap))


def _sample_box(omega: np.ndarray, per_axis: int, cap: int) -> np.ndarray:
    n = omega.shape[0]
    g = per_axis
    while g**n > cap and g > 2:
        g -= 1
    axes = [np.linspace(omega[i, 0], omega[i, 1], g) for i in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def tube_radius(
    f,
    metric: MetricField | None,
    tau: float,
    traj: PolyTrajectory,
    omega,
    samples_per_axis: int = 50,
    max_samples: int = 10**6,
) -> TubeEstimate:
    """Estimate the radius around traj where tau/2-contraction holds.

    K bounds max_ij sup_omega |grad (sym[M Jf] + Mdot - (tau/2) M)_ij|_2 by
    dense sampling (the entries are polynomials, evaluated exactly at the
    samples, but the sup over omega is under-approximated: the result is an
    estimate, not a certificate). c is the sampled minimum eigenvalue of the
    metric; tau and c scale the radius as eps = tau c / (2 n K).
    """
    fmap = _as_polymap(f)
    n = fmap.dimension
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (n, 2):
        raise ValueError("omega must be an (n, 2) box")
    probe = traj.position(np.linspace(0.0, traj.horizon, 256))
    if not (np.all(probe >= omega[:, 0] - 1e-12) and np.all(probe <= omega[:, 1] + 1e-12)):
        raise ValueError("trajectory leaves omega; enlarge the box")

    if metric is None:
        metric = MetricField.identity(n)
    J = fmap.jacobian()
    comps = fmap.components

    def entry(i: int, j: int):
        # G_ij = (M J + (M J)^T)_ij + Mdot_ij - (tau/2) M_ij
        acc = None
        for v in range(n):
            for term in (metric.entry(i, v) * J[v][j], metric.entry(j, v) * J[v][i]):
                acc = term if acc is None else acc + term
            grad = metric.entry(i, j).partial(v)
            if not grad.is_zero:
                acc = acc + grad * comps[v]
        return acc + metric.entry(i, j) * (-0.5 * tau)

    pts = _sample_box(omega, samples_per_axis, max_samples)
    K = 0.0
    for i in range(n):
        for j in range(i, n):
            gij = entry(i, j)
            sq = np.zeros(len(pts))
            for v in range(n):
                p = gij.partial(v)
                if not p.is_zero:
                    sq += np.asarray(p(pts), dtype=float) ** 2
            K = max(K, float(np.sqrt(sq.max())))

    if metric.is_identity:
        c = 1.0
    else:
        c = float(np.linalg.eigvalsh(metric(pts))[:, 0].min())
    eps = np.inf if K == 0.0 else tau * c / (2.0 * n * K)
    return TubeEstimate(float(eps), float(tau), c, K, omega)


@dataclass
class ObstacleField:
    """Timestamped obstacle point sets with single-writer snapshot handoff.

    records is an immutable, time-sorted tuple of (stamp, points) pairs;
    update() swaps in a new tuple in one reference assignment, so readers
    that grab the tuple once always see a consistent set. Query semantics:
    the active points at time t are those of the latest record with
    stamp <= t (none before the first stamp).

    r is the decay exponent (higher = more local), alpha the modulation
    strength (0 disables), rho the clamp radius below which the repulsion
    magnitude saturates at its rho-sphere value.
    """

    records: tuple = ()
    r: int = 4
    alpha: float = 1.0
    rho: float = 1e-3

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 1:
            raise ValueError("decay exponent r must be an integer >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        self.r = int(self.r)
        self.records = self._normalized(self.records)

    @staticmethod
    def _normalized(records) -> tuple:
        out = []
        for stamp, pts in records:
            arr = np.array(pts, dtype=float)
            if arr.ndim != 2:
                raise ValueError("each record needs an (k, n) point array")
            arr.setflags(write=False)
            out.append((float(stamp), arr))
        out.sort(key=lambda rec: rec[0])
        return tuple(out)

    def update(self, stamp: float, points) -> None:
        """Publish a new snapshot; the single writer calls this."""
        arr = np.array(points, dtype=float)
        if arr.ndim != 2:
            raise ValueError("points must be an (k, n) array")
        arr.setflags(write=False)
        merged = self.records + ((float(stamp), arr),)
        if len(self.records) and stamp < self.records[-1][0]:
            merged = tuple(sorted(merged, key=lambda rec: rec[0]))
        self.records = merged  # atomic swap, readers keep their snapshot

    def snapshot(self) -> tuple:
        return self.records

    def active_points(self, t: float) -> np.ndarray | None:
        recs = self.records  # one read; concurrent updates can't tear it
        lo, hi = 0, len(recs)
        while lo < hi:
            mid = (lo + hi) // 2
            if recs[mid][0] <= t:
                lo = mid + 1
            else:
                hi = mid
        return recs[lo - 1][1] if lo else None


def _repulsion(x: np.ndarray, points: np.ndarray, r: int, rho: float) -> np.ndarray:
    d = x[None, :] - points
    dist = np.linalg.norm(d, axis=1)
    out = np.zeros_like(x)
    for k in range(len(points)):
        dk = dist[k]
        if dk == 0.0:
            continue  # no direction at the singularity; clamp covers dk > 0
        mag = max(dk, rho) ** (1 - r)
        out += (d[k] / dk) * mag
    return out


@dataclass(frozen=True)
class ModulatedField:
    """f~(t, x) = f(x) + alpha sum_j (x - j(t)) / |x - j(t)|^r.

    With alpha = 0 or no active obstacle points the base evaluation is
    returned unchanged (exactly: no arithmetic is applied to it).
    """

    base: object
    obstacles: ObstacleField
    time_dependent = True

    @property
    def dimension(self):
        return getattr(self.base, "dimension", None)

    def __call__(self, t: float, x) -> np.ndarray:
        fx = self.base(x)
        ob = self.obstacles
        if ob.alpha == 0.0:
            return fx
        pts = ob.active_points(t)
        if pts is None or len(pts) == 0:
            return fx
        x = np.asarray(x, dtype=float)
        return fx + ob.alpha * _repulsion(x, pts, ob.r, ob.rho)


def modulate(f, obstacles: ObstacleField) -> ModulatedField:
    """Wrap a field with additive repulsion from the obstacle stream."""
    return ModulatedField(f, obstacles)


def calibrate_alpha(f, obstacles: ObstacleField, path_points, times=0.0) -> float:
    """alpha making the peak modulation half the peak field speed.

    Evaluates |f| and the unit-strength repulsion |h| along the nominal
    path (times may be a scalar or one stamp per point) and returns
    0.5 max|f| / max|h|; zero when no obstacle is ever active.
    """
    pts = np.atleast_2d(np.asarray(path_points, dtype=float))
    stamps = np.broadcast_to(np.asarray(times, dtype=float), (len(pts),))
    fmax = 0.0
    hmax = 0.0
    for x, t in zip(pts, stamps):
        fmax = max(fmax, float(np.linalg.norm(f(x))))
        ob = obstacles.active_points(float(t))
        if ob is not None and len(ob):
            h = _repulsion(x, ob, obstacles.r, obstacles.rho)
            hmax = max(hmax, float(np.linalg.norm(h)))
    return 0.0 if hmax == 0.0 else 0.5 * fmax / hmax


def read_obstacle_stream(source, r: int = 4, alpha: float = 1.0, rho: float = 1e-3) -> ObstacleField:
    """Load newline-delimited JSON records {"t": ..., "points": [[...]]}.

    source is a path or any iterable of lines (an open socket file works).
    """
    if isinstance(source, (str, Path)):
        with Path(source).open("r", encoding="utf-8") as fh:
            try:
                return read_obstacle_stream(fh, r=r, alpha=alpha, rho=rho)
            except ValueError as exc:
                raise ValueError(f"{source}: {exc}") from exc
    records = []
    for k, line in enumerate(source, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            records.append((float(rec["t"]), np.array(rec["points"], dtype=float)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f'line {k}: expected {{"t", "points"}} record ({exc})') from exc
    return ObstacleField(tuple(records), r=r, alpha=alpha, rho=rho)


def write_obstacle_stream(path, obstacles: ObstacleField) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for stamp, pts in obstacles.snapshot():
            fh.write(json.dumps({"t": stamp, "points": pts.tolist()}) + "\n")
