"""Demonstration containers, trajectory CSV I/O, and synthetic demo generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Demonstration",
    "read_trajectory_csv",
    "write_trajectory_csv",
    "circle_demo",
    "line_demo",
    "decay_demo",
    "synthetic_angle_set",
    "two_segment_demos",
]


@dataclass(frozen=True)
class Demonstration:
    """Sampled (t, x, xdot) data for one demonstration.

    Velocities are optional; when present they are used for validation
    metrics only, never as the regression target.
    """

    t: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.positions, dtype=float)
        if x.ndim != 2 or len(t) != len(x):
            raise ValueError("positions must be (m, n) matching m times")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "positions", x)
        if self.velocities is not None:
            v = np.asarray(self.velocities, dtype=float)
            if v.shape != x.shape:
                raise ValueError("velocities must match positions shape")
            object.__setattr__(self, "velocities", v)

    @property
    def dimension(self) -> int:
        return self.positions.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.t[-1] - self.t[0])

    def shifted_to_zero(self) -> "Demonstration":
        """Same demonstration with time starting at zero."""
        if self.t[0] == 0.0:
            return self
        return Demonstration(self.t - self.t[0], self.positions, self.velocities)


def read_trajectory_csv(path: str | Path) -> Demonstration:
    """Read `t,x1,...,xn[,v1,...,vn]` rows (UTF-8, '.' decimal separator)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "t":
            raise ValueError(f"{path}: expected header starting with 't'")
        cols = [c.strip() for c in header[1:]]
        n = sum(1 for c in cols if c.startswith("x"))
        nv = sum(1 for c in cols if c.startswith("v"))
        if n == 0 or (nv not in (0, n)) or len(cols) != n + nv:
            raise ValueError(f"{path}: malformed header {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    if arr.shape[1] != 1 + n + nv:
        raise ValueError(f"{path}: row width does not match header")
    t = arr[:, 0]
    pos = arr[:, 1 : 1 + n]
    vel = arr[:, 1 + n :] if nv else None
    return Demonstration(t, pos, vel)


def write_trajectory_csv(path: str | Path, demo: Demonstration) -> None:
    n = demo.dimension
    header = ["t"] + [f"x{i+1}" for i in range(n)]
    if demo.velocities is not None:
        header += [f"v{i+1}" for i in range(n)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(demo.t)):
            row = [repr(float(demo.t[i]))]
            row += [repr(float(v)) for v in demo.positions[i]]
            if demo.velocities is not None:
                row += [repr(float(v)) for v in demo.velocities[i]]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# synthetic demonstrations used by tests, scripts, and the acceptance suite


def circle_demo(
    n_samples: int = 200,
    periods: float = 1.0,
    start_angle: float = np.pi / 4,
    radius: float = np.sqrt(2.0),
    wobble: float = 0.0,
    seed: int = 0,
) -> Demonstration:
    """Hand-drawn-style circular demonstration starting at (1, 1) by default.

    `wobble` adds a smooth seeded radial perturbation (fraction of the
    radius), mimicking an imperfect human demonstration of a circle.
    """
    T = 2 * np.pi * periods
    t = np.linspace(0.0, T, n_samples)
    theta = t + start_angle
    r = np.full_like(t, radius)
    if wobble > 0:
        rng = np.random.default_rng(seed)
        n_modes = 4
        amps = rng.normal(size=n_modes) * wobble * radius / n_modes
        phases = rng.uniform(0, 2 * np.pi, size=n_modes)
        for k in range(n_modes):
            r = r + amps[k] * np.sin((k + 2) * t * (2 * np.pi / T) + phases[k])
    pos = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return Demonstration(t, pos)


def line_demo(start, end, horizon: float = 1.0, n_samples: int = 100) -> Demonstration:
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    t = np.linspace(0.0, horizon, n_samples)
    lam = (t / horizon)[:, None]
    pos = (1 - lam) * start + lam * end
    vel = np.tile((end - start) / horizon, (n_samples, 1))
    return Demonstration(t, pos, vel)


def decay_demo(x0, horizon: float = 4.0, n_samples: int = 200, rate: float = 1.0) -> Demonstration:
    """Samples of the closed-form flow of xdot = -rate * x."""
    x0 = np.asarray(x0, dtype=float)
    t = np.linspace(0.0, horizon, n_samples)
    pos = np.exp(-rate * t)[:, None] * x0
    vel = -rate * pos
    return Demonstration(t, pos, vel)


def synthetic_angle_set(
    n_demos: int = 7,
    n_samples: int = 1000,
    horizon: float = 4.5,
    scale: float = 40.0,
    seed: int = 7,
) -> list[Demonstration]:
    """LASA-Angle-style family: 7 strokes, shared goal at the origin.

    Units mimic tablet millimetres. Not the published dataset; a stand-in
    with the same shape conventions (1000 samples, distinct starts, common
    final point) for pipeline tests when the real CSVs are not available.

    Strokes are time-warped trajectories of a globally contracting
    reference system: a stiff/slow linear pair (fast collapse onto a slow
    manifold makes the corner, the slow mode slides into the goal) bent by
    a gentle quadratic shear. Demonstrations therefore look like pen
    strokes with an angle but remain mutually consistent, the way human
    demos of one motion are.
    """
    lam_fast, lam_slow = 3.0, 0.8
    bend = 0.012
    rot = 0.35  # frame rotation, radians
    c, s = np.cos(rot), np.sin(rot)
    R = np.array([[c, -s], [s, c]])
    base = np.array([1.1, 1.45]) * scale
    rng = np.random.default_rng(seed)
    demos = []
    for i in range(n_demos):
        t = np.linspace(0.0, horizon, n_samples)
        s01 = t / horizon
        # per-demo speed variation: polynomial time warp, monotone for
        # |warp| < 1, analytic, fixes both endpoints
        warp = float(np.clip(0.3 * rng.standard_normal(), -0.5, 0.5))
        tw = horizon * (s01 + warp * s01 * (1.0 - s01))
        y0 = base + rng.normal(scale=0.0875 * scale, size=2)
        y = np.stack(
            [y0[0] * np.exp(-lam_fast * tw), y0[1] * np.exp(-lam_slow * tw)],
            axis=1,
        )
        xy = y @ R.T
        path = xy + bend * np.stack([xy[:, 1] ** 2, xy[:, 0] * xy[:, 1]], axis=1)
        vel = np.gradient(path, t, axis=0)
        demos.append(Demonstration(t, path, vel))
    return demos


def two_segment_demos(
    via=(1.0, 0.6),
    goal=(0.0, 0.0),
    start=(1.6, 1.4),
    horizon: float = 2.5,
    n_samples: int = 300,
) -> tuple[Demonstration, Demonstration]:
    """Synthetic pick/place pair: start -> via, then via -> goal.

    Each segment decelerates smoothly into its endpoint so a contracting
    fit has a well-defined near-equilibrium at the segment end.
    """
    start = np.asarray(start, dtype=float)
    via = np.asarray(via, dtype=float)
    goal = np.asarray(goal, dtype=float)

    def seg(a, b):
        t = np.linspace(0.0, horizon, n_samples)
        lam = 1.0 - np.exp(-3.0 * t / horizon) * (1 + 3.0 * t / horizon)
        lam = (lam - lam[0]) / (lam[-1] - lam[0])
        pos = (1 - lam)[:, None] * a + lam[:, None] * b
        return Demonstration(t, pos)

    return seg(start, via), seg(via, goal)
