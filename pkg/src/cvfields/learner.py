"""Learning contracting polynomial vector fields from demonstrations.

The fit minimizes the exact integrated squared imitation loss over the
coefficients of a polynomial field, subject to the contraction linear matrix
inequality

    sym[M(x) Jf(x)] + Mdot(x) + tau M(x) <= 0,   sym[A] = A + A^T,

enforced along every fitted demonstration curve for all times in its interval.
Composed with a polynomial curve, the left side is a univariate symmetric
matrix polynomial that is affine in the field coefficients, so the constraint
compiles to interval SOS blocks (module soscomp) with no relaxation gap, and
the whole problem becomes a single cone program: a second-order-cone epigraph
of the loss plus one SOS block per demonstration.

Demonstrations are affinely normalized (centered, isotropically scaled, time
rescaled by the longest duration) before fitting; the model keeps the
transform and evaluates in physical units, with the contraction rate
transferred exactly through the time scaling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import roots_legendre

from cvfields.conic import ConeProgramBuilder, SolverSettings, solve, svec
from cvfields.data import Demonstration
from cvfields.polyalg import (
    MonomialBasis,
    Polynomial,
    PolyMap,
    PolyTrajectory,
    UniPoly,
    UniPolyMatrix,
    compose_scaled,
    fit_trajectory,
    integrate,
)
from cvfields.soscomp import (
    CHEBYSHEV,
    CertificateCheck,
    GramDecomposition,
    LinearMatrixPolynomial,
    SampledMatrixFamily,
    append_sosm_constraint,
    extract_certificate,
    sosm_sample_times,
    verify_certificate_values,
)

__all__ = [
    "MetricField",
    "ContractionSpec",
    "FitOptions",
    "NormalizationTransform",
    "QuadraticObjective",
    "FitDiagnostics",
    "VectorFieldModel",
    "LearnerError",
    "build_objective",
    "build_contraction_constraint",
    "contraction_residual_batch",
    "fit",
    "fit_unconstrained",
]


@dataclass(frozen=True)
class MetricField:
    """Symmetric matrix of polynomials M(x), uniformly positive on the region.

    Positivity is a sampled check (positivity_margin is the required smallest
    eigenvalue at every checked point), never assumed.
    """

    entries: tuple[tuple[Polynomial, ...], ...]
    positivity_margin: float = 1e-6

    def __post_init__(self):
        n = len(self.entries)
        if any(len(row) != n for row in self.entries):
            raise ValueError("metric entries must form a square matrix")
        if self.positivity_margin <= 0:
            raise ValueError("positivity margin must be positive")
        for i in range(n):
            for j in range(i):
                a, b = self.entries[i][j], self.entries[j][i]
                if a.basis.dimension != b.basis.dimension:
                    raise ValueError("metric entries live in different dimensions")
                big = MonomialBasis(a.basis.dimension, max(a.basis.degree, b.basis.degree))
                if not np.allclose(a.embed(big).coeffs, b.embed(big).coeffs, atol=1e-12):
                    raise ValueError("metric must be symmetric")
        object.__setattr__(self, "entries", tuple(tuple(row) for row in self.entries))

    @staticmethod
    def identity(n: int) -> "MetricField":
        basis = MonomialBasis(n, 0)
        one = Polynomial.constant(basis, 1.0)
        zero = Polynomial.zero(basis)
        rows = tuple(
            tuple(one if i == j else zero for j in range(n)) for i in range(n)
        )
        return MetricField(rows)

    @property
    def dimension(self) -> int:
        return len(self.entries)

    @cached_property
    def is_identity(self) -> bool:
        for i in range(self.dimension):
            for j in range(self.dimension):
                p = self.entries[i][j]
                want = 1.0 if i == j else 0.0
                c = p.coeffs.copy()
                c[p.basis.index_of((0,) * p.basis.dimension)] -= want
                if np.any(c != 0.0):
                    return False
        return True

    def entry(self, i: int, j: int) -> Polynomial:
        return self.entries[i][j]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = self.dimension
        if x.ndim == 1:
            return np.array([[self.entries[i][j](x) for j in range(n)] for i in range(n)])
        out = np.empty((x.shape[0], n, n))
        for i in range(n):
            for j in range(n):
                out[:, i, j] = self.entries[i][j](x)
        return out

    def pullback(self, shift: np.ndarray, scale: float) -> "MetricField":
        """M(shift + scale * y) as a metric in the y coordinates."""
        n = self.dimension
        s = np.full(n, float(scale))
        rows = tuple(
            tuple(self.entries[i][j].affine_pullback(np.asarray(shift, dtype=float), s) for j in range(n))
            for i in range(n)
        )
        return MetricField(rows, self.positivity_margin)

    def min_eig_sampled(self, points: np.ndarray) -> float:
        vals = self(np.atleast_2d(points))
        return float(min(np.linalg.eigvalsh(v)[0] for v in vals))


@dataclass(frozen=True)
class ContractionSpec:
    """Contraction requirement: rate tau (1/seconds) under a metric."""

    tau: float
    metric: MetricField | None = None  # None means identity
    intervals: tuple[float, ...] | None = None  # per-demo durations, set by fit

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("contraction rate tau must be positive")

    def resolved_metric(self, n: int) -> MetricField:
        if self.metric is None:
            return MetricField.identity(n)
        if self.metric.dimension != n:
            raise ValueError(
                f"metric dimension {self.metric.dimension} does not match field dimension {n}"
            )
        return self.metric


@dataclass(frozen=True)
class FitOptions:
    trajectory_degree: int | None = None  # None: auto policy from polyalg
    max_trajectory_degree: int = 12
    # tighter than the generic curve-fit default: the loss regresses on the
    # fit's derivative, so position slack amplifies into velocity bias
    trajectory_rtol: float = 1e-4
    gram_basis: str = CHEBYSHEV
    # the constraint margin (1e-3) dominates solver slack at this accuracy,
    # so certified models stay strictly contracting; 1e-6 roughly triples
    # solve time on benchmark-scale fits for no model-quality gain
    accuracy: float = 1e-5
    max_iters: int = 25_000
    constraint_margin: float = 1e-3  # PSD slack, in normalized units
    ridge: float = 1e-8
    normalize: bool = True
    sampled_constraints: int | None = None  # replace SOS blocks by pointwise LMIs


@dataclass(frozen=True)
class NormalizationTransform:
    """x = center + scale * y, t = time_scale * s."""

    center: np.ndarray
    scale: float
    time_scale: float

    def __post_init__(self):
        if self.scale <= 0 or self.time_scale <= 0:
            raise ValueError("scale factors must be positive")
        c = np.asarray(self.center, dtype=float).copy()
        c.setflags(write=False)
        object.__setattr__(self, "center", c)

    @staticmethod
    def identity(n: int) -> "NormalizationTransform":
        return NormalizationTransform(np.zeros(n), 1.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and self.time_scale == 1.0
            and not np.any(self.center)
        )

    def to_normalized(self, x):
        return (np.asarray(x, dtype=float) - self.center) / self.scale

    def to_physical(self, y):
        return self.center + self.scale * np.asarray(y, dtype=float)


@dataclass(frozen=True)
class QuadraticObjective:
    """Exact integrated loss as a quadratic form in the stacked coefficients.

    Coefficient layout: component-major, c = [c_1; ...; c_n] with c_i the
    basis coefficients of component i, so Q = I_n (kron) Q_base.
    """

    Q: np.ndarray
    b: np.ndarray
    const: float
    basis: MonomialBasis
    dimension: int

    def value(self, coeff_matrix: np.ndarray) -> float:
        c = np.asarray(coeff_matrix, dtype=float).reshape(-1)
        return float(c @ self.Q @ c - 2.0 * self.b @ c + self.const)


def _composed_monomials(basis: MonomialBasis, traj: PolyTrajectory) -> list[UniPoly]:
    """phi_k composed with the curve, exactly, for every basis monomial.

    Built incrementally: each monomial extends a lower-degree one by a single
    component factor (graded order guarantees the parent is already present).
    """
    comps = [c.coeffs for c in traj.components]
    out: list[np.ndarray] = []
    index = {e: i for i, e in enumerate(basis.exponents)}
    from numpy.polynomial import polynomial as _npoly

    for e in basis.exponents:
        total = sum(e)
        if total == 0:
            out.append(np.array([1.0]))
            continue
        j = next(k for k in range(len(e)) if e[k] > 0)
        parent = list(e)
        parent[j] -= 1
        out.append(_npoly.polymul(out[index[tuple(parent)]], comps[j]))
    return [UniPoly(c) for c in out]


def build_objective(trajectories: list[PolyTrajectory], degree: int) -> QuadraticObjective:
    """Exact (Q, b, const) of sum_i int ||f(x_i(t)) - dx_i(t)||^2 dt.

    Assembled from Gauss-Legendre node values: a rule of sufficient order
    integrates the polynomial integrand with no truncation error, and
    pointwise evaluation sidesteps the power-coefficient blowup that expanding
    the compositions suffers at high composed degree.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    n = trajectories[0].dimension
    if any(t.dimension != n for t in trajectories):
        raise ValueError("trajectories have mixed dimensions")
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    basis = MonomialBasis(n, degree)
    N = len(basis)
    Qb = np.zeros((N, N))
    bvec = np.zeros((n, N))
    const = 0.0
    for traj in trajectories:
        span = traj.scaled_span
        ts = traj.time_scale
        # integrand degree <= 2 max(degree, 1) traj.degree < 2 nq
        nq = max(degree, 1) * max(traj.degree, 1) + 1
        nodes, wts = roots_legendre(nq)
        u = 0.5 * span * (nodes + 1.0)
        w = (0.5 * span * ts) * wts  # includes dt = ts du
        Y = np.stack([c(u) for c in traj.components], axis=1)  # (nq, n)
        V = basis.eval_all(Y)  # (nq, N)
        # velocity in the trajectory's physical time
        dY = np.stack([v(u) for v in traj.scaled_velocity_components()], axis=1) / ts
        Qb += (V.T * w) @ V
        bvec += (dY.T * w) @ V
        const += float(np.sum(w * np.sum(dY * dY, axis=1)))
    Q = np.kron(np.eye(n), Qb)
    return QuadraticObjective(Q, bvec.reshape(-1), const, basis, n)


def _check_metric_positive(traj: PolyTrajectory, metric: MetricField) -> None:
    pts = traj.position(np.linspace(0.0, traj.horizon, 200))
    low = metric.min_eig_sampled(pts)
    if low < metric.positivity_margin:
        raise ValueError(
            f"metric not uniformly positive along the trajectory "
            f"(sampled eigenvalue {low:.3e} < margin {metric.positivity_margin:.1e})"
        )


def build_contraction_constraint(
    traj: PolyTrajectory,
    spec: ContractionSpec,
    degree: int,
    margin: float = 0.0,
) -> LinearMatrixPolynomial:
    """Compose the contraction LMI with the curve: an affine matrix polynomial.

    Returns the family whose value at coefficients c is
        -sym[M Jf] - Mdot - tau M - margin I   evaluated along the curve,
    required to be SOS on the curve's scaled-time interval. The metric's
    uniform positivity is checked on samples of the curve first.
    """
    n = traj.dimension
    metric = spec.resolved_metric(n)
    tau = spec.tau
    basis = MonomialBasis(n, degree)
    N = len(basis)
    span = traj.scaled_span

    _check_metric_positive(traj, metric)

    mono = [m.coeffs for m in _composed_monomials(basis, traj)]
    index = {e: i for i, e in enumerate(basis.exponents)}

    def dmono(k: int, j: int) -> np.ndarray | None:
        """d phi_k / d y_j composed with the curve."""
        e = basis.exponents[k]
        if e[j] == 0:
            return None
        parent = list(e)
        parent[j] -= 1
        return e[j] * mono[index[tuple(parent)]]

    from numpy.polynomial import polynomial as _npoly

    def as_matpoly(entries: list[list[np.ndarray]]) -> UniPolyMatrix:
        deg = max(len(entries[i][j]) for i in range(n) for j in range(n)) - 1
        c = np.zeros((deg + 1, n, n))
        for i in range(n):
            for j in range(n):
                c[: len(entries[i][j]), i, j] = entries[i][j]
        return UniPolyMatrix(c)

    zero = np.zeros(1)
    if metric.is_identity:
        mcomp = None
        const_entries = [
            [np.array([-tau - margin]) if i == j else zero for j in range(n)]
            for i in range(n)
        ]
    else:
        mcomp = [
            [compose_scaled(metric.entry(i, j), traj).coeffs for j in range(n)]
            for i in range(n)
        ]
        dmcomp = [
            [
                [compose_scaled(metric.entry(i, j).partial(v), traj).coeffs for v in range(n)]
                for j in range(n)
            ]
            for i in range(n)
        ]
        const_entries = [
            [
                _npoly.polyadd(
                    -tau * mcomp[i][j], np.array([-margin]) if i == j else zero
                )
                for j in range(n)
            ]
            for i in range(n)
        ]
    const = as_matpoly(const_entries)

    coeffs = []
    for i in range(n):  # field component
        for k in range(N):  # basis monomial
            entries = [[zero for _ in range(n)] for _ in range(n)]
            if metric.is_identity:
                # sym[Jf]_{ab} = J_ab + J_ba touches row/col i only
                for b_ in range(n):
                    d = dmono(k, b_)
                    if d is None:
                        continue
                    entries[i][b_] = _npoly.polyadd(entries[i][b_], -d)
                    entries[b_][i] = _npoly.polyadd(entries[b_][i], -d)
            else:
                for a in range(n):
                    for b_ in range(a, n):
                        acc = zero
                        d = dmono(k, b_)
                        if d is not None:
                            acc = _npoly.polyadd(acc, -_npoly.polymul(mcomp[a][i], d))
                        d = dmono(k, a)
                        if d is not None:
                            acc = _npoly.polyadd(acc, -_npoly.polymul(mcomp[b_][i], d))
                        # Mdot_{ab} = sum_v dM_ab/dy_v * f_v, affine in c_{i,k}
                        acc = _npoly.polyadd(
                            acc, -_npoly.polymul(dmcomp[a][b_][i], mono[k])
                        )
                        entries[a][b_] = _npoly.polyadd(entries[a][b_], acc)
                        if b_ != a:
                            entries[b_][a] = _npoly.polyadd(entries[b_][a], acc)
            coeffs.append(as_matpoly(entries))
    return LinearMatrixPolynomial(const, tuple(coeffs))


def _basis_gradient_values(basis: MonomialBasis, Phi: np.ndarray) -> np.ndarray:
    """dPhi[m, k, j] = d phi_k / d y_j at the points Phi was evaluated at.

    The partial of a monomial is a multiple of a lower-degree basis monomial,
    so the gradient comes from lookups, no extra evaluations.
    """
    m, N = Phi.shape
    n = basis.dimension
    out = np.zeros((m, N, n))
    for k, e in enumerate(basis.exponents):
        for j in range(n):
            if e[j] == 0:
                continue
            parent = list(e)
            parent[j] -= 1
            out[:, k, j] = e[j] * Phi[:, basis.index_of(tuple(parent))]
    return out


def _family_degree(traj: PolyTrajectory, metric: MetricField, degree: int) -> int:
    """Upper bound on the composed LMI family degree (safe to overshoot)."""
    td = max(traj.degree, 0)
    dm = 0
    if not metric.is_identity:
        dm = max(p.basis.degree for row in metric.entries for p in row)
    return td * (dm + max(degree - 1, 0))


def _lmi_value_stacks(
    traj: PolyTrajectory,
    spec: ContractionSpec,
    degree: int,
    margin: float,
    times: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Constraint family values at scaled times, matching theta layout.

    Same family as build_contraction_constraint but evaluated pointwise:
    const (q, n, n) and coeffs (n N, q, n, n). Pointwise products stay on the
    scale of the data where expanded coefficients explode with degree, so
    this is the construction path for fits; the symbolic builder remains the
    low-degree cross-check.
    """
    n = traj.dimension
    metric = spec.resolved_metric(n)
    tau = spec.tau
    basis = MonomialBasis(n, degree)
    N = len(basis)
    q = len(times)
    Y = np.stack([c(np.asarray(times, dtype=float)) for c in traj.components], axis=1)
    Phi = basis.eval_all(Y)
    dPhi = _basis_gradient_values(basis, Phi)
    const = np.zeros((q, n, n))
    coeffs = np.zeros((n * N, q, n, n))
    if metric.is_identity:
        const[:, range(n), range(n)] = -tau - margin
        for i in range(n):
            for k in range(N):
                ent = coeffs[i * N + k]
                for b_ in range(n):
                    d = dPhi[:, k, b_]
                    ent[:, i, b_] -= d
                    ent[:, b_, i] -= d
    else:
        Mv = metric(Y)
        dMv = np.zeros((q, n, n, n))
        for a in range(n):
            for b_ in range(n):
                entry = metric.entry(a, b_)
                for v in range(n):
                    dMv[:, a, b_, v] = entry.partial(v)(Y)
        const = -tau * Mv - margin * np.eye(n)[None, :, :]
        for i in range(n):
            for k in range(N):
                ent = coeffs[i * N + k]
                for a in range(n):
                    for b_ in range(a, n):
                        acc = (
                            -Mv[:, a, i] * dPhi[:, k, b_]
                            - Mv[:, b_, i] * dPhi[:, k, a]
                            - dMv[:, a, b_, i] * Phi[:, k]
                        )
                        ent[:, a, b_] += acc
                        if b_ != a:
                            ent[:, b_, a] += acc
    return const, coeffs


def contraction_residual_batch(
    field: PolyMap, metric: MetricField, tau: float, points: np.ndarray
) -> np.ndarray:
    """lambda_max(sym[M Jf] + Mdot + tau M) at each point, sym[A] = A + A^T."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, n = pts.shape
    J = field.jacobian()
    Jv = np.empty((m, n, n))
    for i in range(n):
        for j in range(n):
            Jv[:, i, j] = J[i][j](pts)
    Mv = metric(pts) if not metric.is_identity else np.broadcast_to(np.eye(n), (m, n, n))
    A = Mv @ Jv
    R = A + np.swapaxes(A, 1, 2) + tau * Mv
    if not metric.is_identity:
        fv = field(pts)
        for i in range(n):
            for j in range(n):
                grad = np.zeros(m)
                for v in range(n):
                    grad += metric.entry(i, j).partial(v)(pts) * fv[:, v]
                R[:, i, j] += grad
    return np.linalg.eigvalsh(R)[:, -1]


@dataclass(frozen=True)
class FitDiagnostics:
    status: str
    iterations: int
    solve_time: float
    assembly_time: float
    n_variables: int
    n_rows: int
    normalized_loss: float
    margin: float
    tau_normalized: float
    trajectory_degrees: tuple[int, ...]
    trajectory_residuals: tuple[float, ...]
    certificate_checks: tuple[CertificateCheck, ...] = ()
    sampled_residual: float = float("nan")
    feasible_tau: float | None = None


class LearnerError(RuntimeError):
    """Fit failed; carries the solve diagnostics."""

    def __init__(self, message: str, diagnostics: FitDiagnostics | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class VectorFieldModel:
    """A fitted polynomial field with its normalization and audit trail.

    normalized_field is g in the centered/scaled coordinates; the physical
    field is f(x) = (scale / time_scale) * g((x - center) / scale).
    """

    normalized_field: PolyMap
    transform: NormalizationTransform
    spec: ContractionSpec | None
    loss: float
    diagnostics: FitDiagnostics
    demo_ids: tuple[str, ...] = ()
    certificates: tuple[GramDecomposition, ...] = ()

    @cached_property
    def field(self) -> PolyMap:
        """The field in physical coordinates and physical time."""
        tr = self.transform
        if tr.is_identity:
            return self.normalized_field
        shift = -tr.center / tr.scale
        scale = np.full(self.dimension, 1.0 / tr.scale)
        amp = tr.scale / tr.time_scale
        comps = tuple(
            amp * c.affine_pullback(shift, scale)
            for c in self.normalized_field.components
        )
        return PolyMap(comps)

    def __call__(self, x) -> np.ndarray:
        return self.field(x)

    @property
    def dimension(self) -> int:
        return self.normalized_field.dimension

    @property
    def degree(self) -> int:
        return self.normalized_field.basis.degree

    def to_dict(self) -> dict:
        tr = self.transform
        d = {
            "dimension": self.dimension,
            "degree": self.degree,
            "monomial_order": "grlex",
            "coefficients": [c.coeffs.tolist() for c in self.normalized_field.components],
            "transform": {
                "center": tr.center.tolist(),
                "scale": tr.scale,
                "time_scale": tr.time_scale,
            },
            "loss": self.loss,
            "demo_ids": list(self.demo_ids),
            "diagnostics": {
                "status": self.diagnostics.status,
                "iterations": self.diagnostics.iterations,
                "solve_time": self.diagnostics.solve_time,
                "assembly_time": self.diagnostics.assembly_time,
                "n_variables": self.diagnostics.n_variables,
                "n_rows": self.diagnostics.n_rows,
                "normalized_loss": self.diagnostics.normalized_loss,
                "margin": self.diagnostics.margin,
                "tau_normalized": self.diagnostics.tau_normalized,
                "trajectory_degrees": list(self.diagnostics.trajectory_degrees),
                "trajectory_residuals": list(self.diagnostics.trajectory_residuals),
                "sampled_residual": self.diagnostics.sampled_residual,
                "feasible_tau": self.diagnostics.feasible_tau,
                "certificates": [
                    {
                        "ok": c.ok,
                        "failure": c.failure,
                        "recon_error": c.recon_error,
                        "min_gram_eig": c.min_gram_eig,
                    }
                    for c in self.diagnostics.certificate_checks
                ],
            },
        }
        if self.spec is not None:
            metric = self.spec.metric
            d["spec"] = {
                "tau": self.spec.tau,
                "intervals": list(self.spec.intervals or ()),
                "metric": None
                if metric is None
                else {
                    "dimension": metric.dimension,
                    "degree": metric.entries[0][0].basis.degree,
                    "positivity_margin": metric.positivity_margin,
                    "entries": [
                        [
                            metric.entries[i][j].coeffs.tolist()
                            for j in range(metric.dimension)
                        ]
                        for i in range(metric.dimension)
                    ],
                },
            }
        else:
            d["spec"] = None
        return d

    @staticmethod
    def from_dict(d: dict) -> "VectorFieldModel":
        n = int(d["dimension"])
        basis = MonomialBasis(n, int(d["degree"]))
        comps = tuple(Polynomial(basis, np.array(c)) for c in d["coefficients"])
        tr = NormalizationTransform(
            np.array(d["transform"]["center"]),
            float(d["transform"]["scale"]),
            float(d["transform"]["time_scale"]),
        )
        spec = None
        if d.get("spec") is not None:
            sd = d["spec"]
            metric = None
            if sd.get("metric") is not None:
                md = sd["metric"]
                mb = MonomialBasis(int(md["dimension"]), int(md["degree"]))
                metric = MetricField(
                    tuple(
                        tuple(Polynomial(mb, np.array(c)) for c in row)
                        for row in md["entries"]
                    ),
                    float(md["positivity_margin"]),
                )
            spec = ContractionSpec(
                float(sd["tau"]), metric, tuple(sd["intervals"]) or None
            )
        dd = d["diagnostics"]
        diag = FitDiagnostics(
            status=dd["status"],
            iterations=int(dd["iterations"]),
            solve_time=float(dd["solve_time"]),
            assembly_time=float(dd["assembly_time"]),
            n_variables=int(dd["n_variables"]),
            n_rows=int(dd["n_rows"]),
            normalized_loss=float(dd["normalized_loss"]),
            margin=float(dd["margin"]),
            tau_normalized=float(dd["tau_normalized"]),
            trajectory_degrees=tuple(dd["trajectory_degrees"]),
            trajectory_residuals=tuple(dd["trajectory_residuals"]),
            certificate_checks=tuple(
                CertificateCheck(
                    bool(c["ok"]), c["failure"], float(c["recon_error"]), float(c["min_gram_eig"])
                )
                for c in dd.get("certificates", ())
            ),
            sampled_residual=float(dd["sampled_residual"]),
            feasible_tau=dd.get("feasible_tau"),
        )
        return VectorFieldModel(
            normalized_field=PolyMap(comps),
            transform=tr,
            spec=spec,
            loss=float(d["loss"]),
            diagnostics=diag,
            demo_ids=tuple(d.get("demo_ids", ())),
        )


def _normalization(demos: list[Demonstration], enabled: bool) -> NormalizationTransform:
    n = demos[0].dimension
    if not enabled:
        return NormalizationTransform.identity(n)
    allpos = np.vstack([d.positions for d in demos])
    lo, hi = allpos.min(axis=0), allpos.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(np.max(hi - lo)) / 2.0
    if scale <= 0:
        scale = 1.0
    t_ref = max(d.horizon for d in demos)
    return NormalizationTransform(center, scale, t_ref)


def _fit_normalized_trajectories(
    demos: list[Demonstration], tr: NormalizationTransform, opts: FitOptions
) -> list[PolyTrajectory]:
    trajs = []
    for d in demos:
        s = d.t / tr.time_scale
        y = tr.to_normalized(d.positions)
        trajs.append(
            fit_trajectory(
                s,
                y,
                degree=opts.trajectory_degree,
                time_scale=1.0,
                max_degree=opts.max_trajectory_degree,
                rtol=opts.trajectory_rtol,
            )
        )
    return trajs


def _validate_fit_inputs(demos: list[Demonstration], degree: int) -> int:
    if not demos:
        raise ValueError("need at least one demonstration")
    n = demos[0].dimension
    if any(d.dimension != n for d in demos):
        raise ValueError("demonstrations have mixed dimensions")
    if degree < 1:
        raise ValueError("field degree must be at least 1")
    return n


def _whitened_epigraph(builder: ConeProgramBuilder, obj: QuadraticObjective, ridge: float, z, epi):
    """Emit ||z - h||^2 <= epi in whitened coordinates z = R theta.

    R'R = Q + ridge I and h = R^{-T} b, so the integrated loss equals
    ||z - h||^2 up to a constant and the cone block has an identity
    Hessian. The spread of Q's eigenvalues moves into the constraint
    columns of z (through theta = Rinv z), where equilibration can
    balance it per column; kept inside the quadratic it stalls the
    splitting solver on ill-conditioned regressions. Returns Rinv.

    The squared residual enters through the quad-over-lin cone
    ||(2(z - h), epi - 1)|| <= epi + 1, not the plain norm cone
    epi >= ||z - h||: demos an exact polynomial field can interpolate
    drive the optimal residual to zero, and the norm cone's optimum then
    sits at its apex, where the splitting iteration stalls. The rotated
    form keeps the optimum on smooth boundary for any residual value.

    Eigenvalues are floored at a fraction of the largest: demos that span
    a low-dimensional variety (a straight-line demo, say) leave whole
    monomial directions unobserved, and b vanishes on those directions, so
    the floor only shrinks the unobserved part of theta toward zero (the
    minimum-norm fit) instead of letting the back-map blow up.
    """
    Qr = obj.Q + ridge * np.eye(obj.Q.shape[0])
    w, U = np.linalg.eigh(Qr)
    w = np.clip(w, max(ridge, w.max() * 1e-6), None)
    root = np.sqrt(w)
    h = (U.T @ obj.b) / root
    ofs = builder.add_cone("soc", 2 + len(h))
    builder.add_entry(ofs, int(epi[0]), -1.0)
    builder.set_rhs(ofs, 1.0)
    for r in range(len(h)):
        builder.add_entry(ofs + 1 + r, int(z[r]), -2.0)
        builder.set_rhs(ofs + 1 + r, -2.0 * h[r])
    builder.add_entry(ofs + 1 + len(h), int(epi[0]), -1.0)
    builder.set_rhs(ofs + 1 + len(h), -1.0)
    return U / root


def _append_sampled_lmi(
    builder: ConeProgramBuilder,
    const_vals: np.ndarray,
    coeff_vals: np.ndarray,
    theta,
) -> None:
    """Pointwise PSD constraints at the sampled times (a relaxation)."""
    for t_idx in range(const_vals.shape[0]):
        k = const_vals.shape[1]
        ofs = builder.add_cone("psd", k)
        rhs = svec(const_vals[t_idx])
        for r in range(len(rhs)):
            builder.set_rhs(ofs + r, rhs[r])
        for v in range(coeff_vals.shape[0]):
            vals = svec(coeff_vals[v, t_idx])
            for r in range(len(vals)):
                builder.add_entry(ofs + r, int(theta[v]), -vals[r])


def fit(
    demos: list[Demonstration],
    degree: int,
    spec: ContractionSpec,
    options: FitOptions | None = None,
) -> VectorFieldModel:
    """Fit a contracting polynomial field to the demonstrations.

    Raises LearnerError (with diagnostics attached) when the solver does not
    reach an optimal status; on infeasibility the diagnostics carry the
    largest feasible tau found by bisection.
    """
    opts = options or FitOptions()
    n = _validate_fit_inputs(demos, degree)
    t0 = time.perf_counter()

    tr = _normalization(demos, opts.normalize)
    tau_hat = spec.tau * tr.time_scale
    metric_hat = spec.resolved_metric(n)
    if not tr.is_identity and not metric_hat.is_identity:
        metric_hat = metric_hat.pullback(tr.center, tr.scale)
    trajs = _fit_normalized_trajectories(demos, tr, opts)
    obj = build_objective(trajs, degree)
    norm_spec = ContractionSpec(tau_hat, metric_hat if not metric_hat.is_identity else None)

    for traj in trajs:
        _check_metric_positive(traj, metric_hat)

    def assemble(tau_value: float, with_objective: bool):
        builder = ConeProgramBuilder()
        theta = builder.add_vars(obj.Q.shape[0])
        handles = []
        back = None
        if with_objective:
            epi = builder.add_vars(1)
            back = _whitened_epigraph(builder, obj, opts.ridge, theta, epi)
            builder.add_objective(int(epi[0]), 1.0)
        tau_spec = replace(norm_spec, tau=tau_value)
        for traj in trajs:
            span = traj.scaled_span
            if opts.sampled_constraints:
                times = np.linspace(0.0, span, opts.sampled_constraints)
                cvals, tvals = _lmi_value_stacks(
                    traj, tau_spec, degree, opts.constraint_margin, times
                )
                if back is not None:
                    tvals = np.einsum("vqab,vj->jqab", tvals, back)
                _append_sampled_lmi(builder, cvals, tvals, theta)
            else:
                d_fam = _family_degree(traj, metric_hat, degree)
                times = sosm_sample_times(d_fam, span)
                cvals, tvals = _lmi_value_stacks(
                    traj, tau_spec, degree, opts.constraint_margin, times
                )
                if back is not None:
                    tvals = np.einsum("vqab,vj->jqab", tvals, back)
                fam = SampledMatrixFamily(cvals, tvals, d_fam, span)
                handles.append(
                    append_sosm_constraint(
                        builder, fam, theta, span, gram_basis=opts.gram_basis
                    )
                )
        return builder, theta, handles, back

    builder, theta, handles, back = assemble(tau_hat, with_objective=True)
    assembly_time = time.perf_counter() - t0
    settings = SolverSettings(accuracy=opts.accuracy, max_iters=opts.max_iters)
    sol = solve(builder.build(), settings)

    traj_degrees = tuple(t.degree for t in trajs)
    traj_residuals = tuple(t.residual for t in trajs)

    if sol.status != "optimal":
        feasible_tau = None
        if sol.status == "infeasible":
            lo, hi = 0.0, tau_hat
            quick = SolverSettings(accuracy=opts.accuracy, max_iters=min(opts.max_iters, 5000))
            for _ in range(8):
                mid = 0.5 * (lo + hi)
                b2, _, _, _ = assemble(mid, with_objective=False)
                if solve(b2.build(), quick).status == "optimal":
                    lo = mid
                else:
                    hi = mid
            feasible_tau = lo / tr.time_scale
        diag = FitDiagnostics(
            status=sol.status,
            iterations=sol.iterations,
            solve_time=sol.wall_time,
            assembly_time=assembly_time,
            n_variables=builder.n_vars,
            n_rows=builder.n_rows,
            normalized_loss=float("nan"),
            margin=opts.constraint_margin,
            tau_normalized=tau_hat,
            trajectory_degrees=traj_degrees,
            trajectory_residuals=traj_residuals,
            feasible_tau=feasible_tau,
        )
        raise LearnerError(f"fit did not reach optimality: {sol.status}", diag)

    N = len(obj.basis)
    C = (back @ sol.x[: n * N]).reshape(n, N)
    g = PolyMap(tuple(Polynomial(obj.basis, C[i]) for i in range(n)))
    normalized_loss = obj.value(C)
    loss_phys = (tr.scale**2 / tr.time_scale) * normalized_loss

    checks = []
    certs = []
    check_tol = max(1e-8, 100.0 * opts.accuracy)
    for handle, traj in zip(handles, trajs):
        cert = extract_certificate(handle, sol.x)
        # audit at nodes independent of the construction nodes
        d_fam = _family_degree(traj, metric_hat, degree)
        audit_times = sosm_sample_times(2 * d_fam + 1, traj.scaled_span)
        cvals, tvals = _lmi_value_stacks(
            traj, norm_spec, degree, opts.constraint_margin, audit_times
        )
        target = cvals + np.einsum("v,vqab->qab", C.reshape(-1), tvals)
        checks.append(
            verify_certificate_values(
                audit_times, target, cert, recon_rtol=check_tol, eig_tol=check_tol
            )
        )
        certs.append(cert)

    full_spec = ContractionSpec(
        spec.tau,
        spec.metric,
        intervals=tuple(float(d.horizon) for d in demos),
    )

    # sampled soundness audit along the fitted curves, in physical units
    metric_phys = spec.resolved_metric(n)
    probe = VectorFieldModel(
        normalized_field=g,
        transform=tr,
        spec=None,
        loss=loss_phys,
        diagnostics=FitDiagnostics(
            "probe", 0, 0.0, 0.0, 0, 0, 0.0, 0.0, 0.0, (), ()
        ),
    )
    f_phys = probe.field
    worst = -np.inf
    for traj in trajs:
        s = np.linspace(0.0, traj.horizon, 1000)
        x = tr.to_physical(traj.position(s))
        res = contraction_residual_batch(f_phys, metric_phys, spec.tau, x)
        worst = max(worst, float(res.max()))

    return VectorFieldModel(
        normalized_field=g,
        transform=tr,
        spec=full_spec,
        loss=loss_phys,
        diagnostics=FitDiagnostics(
            status=sol.status,
            iterations=sol.iterations,
            solve_time=sol.wall_time,
            assembly_time=assembly_time,
            n_variables=builder.n_vars,
            n_rows=builder.n_rows,
            normalized_loss=normalized_loss,
            margin=opts.constraint_margin,
            tau_normalized=tau_hat,
            trajectory_degrees=traj_degrees,
            trajectory_residuals=traj_residuals,
            certificate_checks=tuple(checks),
            sampled_residual=worst,
        ),
        demo_ids=tuple(f"demo-{i}" for i in range(len(demos))),
        certificates=tuple(certs),
    )


def fit_unconstrained(
    demos: list[Demonstration],
    degree: int,
    options: FitOptions | None = None,
) -> VectorFieldModel:
    """Least-squares baseline: the same loss with no contraction constraint."""
    opts = options or FitOptions()
    n = _validate_fit_inputs(demos, degree)
    t0 = time.perf_counter()
    tr = _normalization(demos, opts.normalize)
    trajs = _fit_normalized_trajectories(demos, tr, opts)
    obj = build_objective(trajs, degree)
    Qr = obj.Q + opts.ridge * np.eye(obj.Q.shape[0])
    c = np.linalg.solve(Qr, obj.b)
    elapsed = time.perf_counter() - t0
    N = len(obj.basis)
    C = c.reshape(n, N)
    g = PolyMap(tuple(Polynomial(obj.basis, C[i]) for i in range(n)))
    normalized_loss = obj.value(C)
    diag = FitDiagnostics(
        status="normal-equations",
        iterations=0,
        solve_time=elapsed,
        assembly_time=elapsed,
        n_variables=obj.Q.shape[0],
        n_rows=0,
        normalized_loss=normalized_loss,
        margin=0.0,
        tau_normalized=float("nan"),
        trajectory_degrees=tuple(t.degree for t in trajs),
        trajectory_residuals=tuple(t.residual for t in trajs),
    )
    return VectorFieldModel(
        normalized_field=g,
        transform=tr,
        spec=None,
        loss=(tr.scale**2 / tr.time_scale) * normalized_loss,
        diagnostics=diag,
        demo_ids=tuple(f"demo-{i}" for i in range(len(demos))),
    )
