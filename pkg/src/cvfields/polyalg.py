"""Polynomial algebra: multivariate monomial-basis polynomials, univariate
(matrix) polynomials in time, curve composition, exact integration, and
least-squares trajectory fitting.

All types are immutable after construction; every operation is a pure
function, safe to call concurrently.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import chebyshev as _cheb
from numpy.polynomial import polynomial as _npoly

__all__ = [
    "MonomialBasis",
    "Polynomial",
    "PolyMap",
    "UniPoly",
    "UniPolyMatrix",
    "PolyTrajectory",
    "compose",
    "compose_scaled",
    "integrate",
    "fit_trajectory",
    "DEFAULT_MAX_FIT_DEGREE",
    "DEFAULT_FIT_RTOL",
]

# auto-fit policy: smallest degree <= 12 with RMS residual < 1% of the
# bounding-box diagonal
DEFAULT_MAX_FIT_DEGREE = 12
DEFAULT_FIT_RTOL = 1e-2


def _grlex_exponents(dimension: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """All exponent tuples with total degree <= degree, graded lex order."""
    exps = []
    for total in range(degree + 1):
        block = [
            e
            for e in itertools.product(range(total + 1), repeat=dimension)
            if sum(e) == total
        ]
        block.sort()
        exps.extend(block)
    return tuple(exps)


@dataclass(frozen=True)
class MonomialBasis:
    """Monomials of n variables up to total degree d, in graded lex order."""

    dimension: int
    degree: int

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be a positive integer")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")

    @cached_property
    def exponents(self) -> tuple[tuple[int, ...], ...]:
        return _grlex_exponents(self.dimension, self.degree)

    @cached_property
    def _exp_array(self) -> np.ndarray:
        a = np.array(self.exponents, dtype=np.int64)
        a.setflags(write=False)
        return a

    @cached_property
    def _index(self) -> dict[tuple[int, ...], int]:
        return {e: i for i, e in enumerate(self.exponents)}

    def __len__(self) -> int:
        return len(self.exponents)

    def index_of(self, exponent: tuple[int, ...]) -> int:
        return self._index[tuple(exponent)]

    def eval_all(self, x: np.ndarray) -> np.ndarray:
        """Values of every monomial at points x of shape (n,) or (m, n)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        if pts.shape[-1] != self.dimension:
            raise ValueError(
                f"point dimension {pts.shape[-1]} != basis dimension {self.dimension}"
            )
        # pts: (m, n), exponents: (N, n) -> (m, N)
        vals = np.prod(pts[:, None, :] ** self._exp_array[None, :, :], axis=-1)
        return vals[0] if single else vals


def _aligned(a: "Polynomial", b: "Polynomial") -> tuple["Polynomial", "Polynomial"]:
    if a.basis.dimension != b.basis.dimension:
        raise ValueError("polynomials live in different dimensions")
    if a.basis == b.basis:
        return a, b
    d = max(a.basis.degree, b.basis.degree)
    basis = MonomialBasis(a.basis.dimension, d)
    return a.embed(basis), b.embed(basis)


@dataclass(frozen=True)
class Polynomial:
    """Real polynomial stored as a dense coefficient vector over a MonomialBasis."""

    basis: MonomialBasis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (len(self.basis),):
            raise ValueError(
                f"coefficient length {c.shape} does not match basis size {len(self.basis)}"
            )
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @staticmethod
    def zero(basis: MonomialBasis) -> "Polynomial":
        return Polynomial(basis, np.zeros(len(basis)))

    @staticmethod
    def constant(basis: MonomialBasis, value: float) -> "Polynomial":
        c = np.zeros(len(basis))
        c[basis.index_of((0,) * basis.dimension)] = value
        return Polynomial(basis, c)

    @staticmethod
    def monomial(basis: MonomialBasis, exponent: tuple[int, ...], coeff: float = 1.0) -> "Polynomial":
        c = np.zeros(len(basis))
        c[basis.index_of(exponent)] = coeff
        return Polynomial(basis, c)

    def __call__(self, x) -> float | np.ndarray:
        return self.basis.eval_all(x) @ self.coeffs

    def embed(self, basis: MonomialBasis) -> "Polynomial":
        """Re-express in a larger basis of the same dimension."""
        if basis.dimension != self.basis.dimension or basis.degree < self.basis.degree:
            raise ValueError("target basis cannot hold this polynomial")
        c = np.zeros(len(basis))
        for e, v in zip(self.basis.exponents, self.coeffs):
            c[basis.index_of(e)] = v
        return Polynomial(basis, c)

    def partial(self, j: int) -> "Polynomial":
        """Partial derivative with respect to variable j, in the same basis."""
        c = np.zeros(len(self.basis))
        for e, v in zip(self.basis.exponents, self.coeffs):
            if v == 0.0 or e[j] == 0:
                continue
            de = list(e)
            de[j] -= 1
            c[self.basis.index_of(tuple(de))] += e[j] * v
        return Polynomial(self.basis, c)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.basis, float(other))
        a, b = _aligned(self, other)
        return Polynomial(a.basis, a.coeffs + b.coeffs)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.basis, -self.coeffs)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Polynomial) else -float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(self.basis, self.coeffs * float(other))
        if self.basis.dimension != other.basis.dimension:
            raise ValueError("polynomials live in different dimensions")
        basis = MonomialBasis(self.basis.dimension, self.basis.degree + other.basis.degree)
        c = np.zeros(len(basis))
        nz_a = np.nonzero(self.coeffs)[0]
        nz_b = np.nonzero(other.coeffs)[0]
        for ia in nz_a:
            ea = self.basis.exponents[ia]
            va = self.coeffs[ia]
            for ib in nz_b:
                eb = other.basis.exponents[ib]
                e = tuple(x + y for x, y in zip(ea, eb))
                c[basis.index_of(e)] += va * other.coeffs[ib]
        return Polynomial(basis, c)

    __rmul__ = __mul__

    def affine_pullback(self, shift: np.ndarray, scale: np.ndarray) -> "Polynomial":
        """Exact substitution x_i -> scale_i * x_i + shift_i (same degree)."""
        shift = np.asarray(shift, dtype=float)
        scale = np.asarray(scale, dtype=float)
        n = self.basis.dimension
        basis = self.basis
        # univariate expansion (a*x + b)^k per variable, composed per monomial
        out = np.zeros(len(basis))
        for e, v in zip(basis.exponents, self.coeffs):
            if v == 0.0:
                continue
            # start from scalar 1 and multiply in each variable's expansion
            term = {(0,) * n: v}
            for j in range(n):
                if e[j] == 0:
                    continue
                # (scale_j x_j + shift_j)^{e_j} binomial coefficients
                pows = {}
                for k in range(e[j] + 1):
                    pows[k] = (
                        _binom(e[j], k) * scale[j] ** k * shift[j] ** (e[j] - k)
                    )
                new_term = {}
                for mono, coef in term.items():
                    for k, w in pows.items():
                        if w == 0.0:
                            continue
                        m = list(mono)
                        m[j] += k
                        key = tuple(m)
                        new_term[key] = new_term.get(key, 0.0) + coef * w
                term = new_term
            for mono, coef in term.items():
                out[basis.index_of(mono)] += coef
        return Polynomial(basis, out)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coeffs)


def _binom(n: int, k: int) -> float:
    from math import comb

    return float(comb(n, k))


@dataclass(frozen=True)
class PolyMap:
    """Vector field R^n -> R^n whose components share one monomial basis."""

    components: tuple[Polynomial, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a PolyMap needs at least one component")
        basis = comps[0].basis
        if any(c.basis != basis for c in comps):
            d = max(c.basis.degree for c in comps)
            big = MonomialBasis(basis.dimension, d)
            comps = tuple(c.embed(big) for c in comps)
        object.__setattr__(self, "components", comps)

    @property
    def basis(self) -> MonomialBasis:
        return self.components[0].basis

    @property
    def dimension(self) -> int:
        return self.basis.dimension

    @cached_property
    def coeff_matrix(self) -> np.ndarray:
        m = np.stack([c.coeffs for c in self.components])
        m.setflags(write=False)
        return m

    def __call__(self, x) -> np.ndarray:
        """Evaluate at x of shape (n,) or a batch (m, n)."""
        vals = self.basis.eval_all(x)
        return vals @ self.coeff_matrix.T

    def jacobian(self) -> list[list[Polynomial]]:
        """Matrix of partials; entry (i, j) is d f_i / d x_j."""
        return [
            [fi.partial(j) for j in range(self.dimension)]
            for fi in self.components
        ]

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        J = self.jacobian()
        return np.array([[J[i][j](x) for j in range(self.dimension)] for i in range(self.dimension)])


# ---------------------------------------------------------------------------
# univariate polynomials in time


@dataclass(frozen=True)
class UniPoly:
    """Univariate polynomial, coefficients in ascending powers."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=float)).copy()
        if c.ndim != 1 or c.size == 0:
            raise ValueError("coefficients must be a nonempty 1-d array")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @staticmethod
    def zero() -> "UniPoly":
        return UniPoly(np.zeros(1))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, t):
        return _npoly.polyval(np.asarray(t, dtype=float), self.coeffs)

    def __add__(self, other):
        o = other.coeffs if isinstance(other, UniPoly) else np.array([float(other)])
        return UniPoly(_npoly.polyadd(self.coeffs, o))

    __radd__ = __add__

    def __neg__(self):
        return UniPoly(-self.coeffs)

    def __sub__(self, other):
        o = other if isinstance(other, UniPoly) else UniPoly(np.array([float(other)]))
        return self + (-o)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return UniPoly(self.coeffs * float(other))
        return UniPoly(_npoly.polymul(self.coeffs, other.coeffs))

    __rmul__ = __mul__

    def deriv(self) -> "UniPoly":
        if self.degree == 0:
            return UniPoly.zero()
        return UniPoly(_npoly.polyder(self.coeffs))

    def antideriv(self) -> "UniPoly":
        return UniPoly(_npoly.polyint(self.coeffs))

    def normalized(self, tol: float = 0.0) -> "UniPoly":
        """Strip trailing coefficients with absolute value <= tol."""
        c = self.coeffs
        k = len(c)
        while k > 1 and abs(c[k - 1]) <= tol:
            k -= 1
        return UniPoly(c[:k])

    def rescale_time(self, factor: float) -> "UniPoly":
        """Return q with q(t) = p(factor * t), exactly."""
        k = np.arange(len(self.coeffs))
        return UniPoly(self.coeffs * float(factor) ** k)


def integrate(u: UniPoly, horizon: float) -> float:
    """Exact integral of u over [0, horizon]."""
    if horizon <= 0:
        raise ValueError("integration horizon must be positive")
    anti = u.antideriv()
    return float(anti(horizon) - anti(0.0))


@dataclass(frozen=True)
class UniPolyMatrix:
    """Symmetric-matrix-valued univariate polynomial sum_k C_k t^k."""

    coeffs: np.ndarray  # (deg+1, k, k)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 3 or c.shape[1] != c.shape[2] or c.shape[0] == 0:
            raise ValueError("expected coefficient array of shape (deg+1, k, k)")
        if not np.allclose(c, np.swapaxes(c, 1, 2), atol=1e-12 * max(1.0, np.abs(c).max())):
            raise ValueError("coefficient matrices must be symmetric")
        c = 0.5 * (c + np.swapaxes(c, 1, 2))
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @staticmethod
    def zero(size: int, degree: int = 0) -> "UniPolyMatrix":
        return UniPolyMatrix(np.zeros((degree + 1, size, size)))

    @staticmethod
    def constant(mat: np.ndarray) -> "UniPolyMatrix":
        return UniPolyMatrix(np.asarray(mat, dtype=float)[None, :, :])

    @staticmethod
    def from_entries(entries: list[list[UniPoly]]) -> "UniPolyMatrix":
        k = len(entries)
        deg = max(entries[i][j].degree for i in range(k) for j in range(k))
        c = np.zeros((deg + 1, k, k))
        for i in range(k):
            for j in range(k):
                cij = entries[i][j].coeffs
                c[: len(cij), i, j] = cij
        return UniPolyMatrix(c)

    @property
    def size(self) -> int:
        return self.coeffs.shape[1]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    def __call__(self, t: float) -> np.ndarray:
        powers = np.asarray(t, dtype=float) ** np.arange(self.coeffs.shape[0])
        return np.tensordot(powers, self.coeffs, axes=(0, 0))

    def entry(self, i: int, j: int) -> UniPoly:
        return UniPoly(self.coeffs[:, i, j])

    def __add__(self, other: "UniPolyMatrix") -> "UniPolyMatrix":
        if self.size != other.size:
            raise ValueError("size mismatch")
        d = max(self.coeffs.shape[0], other.coeffs.shape[0])
        c = np.zeros((d, self.size, self.size))
        c[: self.coeffs.shape[0]] += self.coeffs
        c[: other.coeffs.shape[0]] += other.coeffs
        return UniPolyMatrix(c)

    def __mul__(self, scalar: float) -> "UniPolyMatrix":
        return UniPolyMatrix(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "UniPolyMatrix":
        return UniPolyMatrix(-self.coeffs)

    def normalized(self, tol: float = 0.0) -> "UniPolyMatrix":
        """Strip trailing coefficient matrices with max |entry| <= tol."""
        c = self.coeffs
        k = c.shape[0]
        while k > 1 and np.abs(c[k - 1]).max() <= tol:
            k -= 1
        return UniPolyMatrix(c[:k])

    def rescale_time(self, factor: float) -> "UniPolyMatrix":
        k = np.arange(self.coeffs.shape[0], dtype=float)
        return UniPolyMatrix(self.coeffs * (float(factor) ** k)[:, None, None])


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class PolyTrajectory:
    """Polynomial-in-time approximation of one demonstration.

    Components are stored in scaled time s = t / time_scale for numerical
    conditioning; `position` and `velocity` take physical time. The curve is
    defined on [0, horizon] physical seconds, i.e. s in [0, horizon/time_scale].
    """

    dimension: int
    horizon: float
    time_scale: float
    components: tuple[UniPoly, ...]
    residual: float

    def __post_init__(self):
        if len(self.components) != self.dimension:
            raise ValueError("component count must match dimension")
        if self.horizon <= 0 or self.time_scale <= 0:
            raise ValueError("horizon and time_scale must be positive")
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")

    @property
    def scaled_span(self) -> float:
        """Upper end of the scaled-time interval [0, horizon/time_scale]."""
        return self.horizon / self.time_scale

    @property
    def degree(self) -> int:
        return max(c.degree for c in self.components)

    def position(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=float) / self.time_scale
        vals = [c(s) for c in self.components]
        return np.stack(vals, axis=-1)

    def velocity(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=float) / self.time_scale
        vals = [c.deriv()(s) / self.time_scale for c in self.components]
        return np.stack(vals, axis=-1)

    def scaled_velocity_components(self) -> tuple[UniPoly, ...]:
        """d/ds of the scaled components (velocity in scaled time)."""
        return tuple(c.deriv() for c in self.components)

    def with_time_scale(self, time_scale: float) -> "PolyTrajectory":
        """Same curve re-expressed over a different scaled-time unit."""
        factor = time_scale / self.time_scale
        comps = tuple(c.rescale_time(factor) for c in self.components)
        return PolyTrajectory(self.dimension, self.horizon, time_scale, comps, self.residual)


def compose_scaled(p: Polynomial, traj: PolyTrajectory) -> UniPoly:
    """Exact substitution of the trajectory into p, in scaled time s."""
    if p.basis.dimension != traj.dimension:
        raise ValueError("polynomial and trajectory dimensions differ")
    # cache powers of each component
    pows: list[list[np.ndarray]] = []
    max_e = np.max(p.basis._exp_array, axis=0) if len(p.basis) else []
    for j, comp in enumerate(traj.components):
        pj = [np.array([1.0])]
        for _ in range(int(max_e[j])):
            pj.append(_npoly.polymul(pj[-1], comp.coeffs))
        pows.append(pj)
    acc = np.zeros(1)
    for e, v in zip(p.basis.exponents, p.coeffs):
        if v == 0.0:
            continue
        term = np.array([v])
        for j, ej in enumerate(e):
            if ej:
                term = _npoly.polymul(term, pows[j][ej])
        acc = _npoly.polyadd(acc, term)
    return UniPoly(acc)


def compose(p: Polynomial, traj: PolyTrajectory) -> UniPoly:
    """Exact symbolic substitution x -> traj(t); result is in physical time."""
    scaled = compose_scaled(p, traj)
    return scaled.rescale_time(1.0 / traj.time_scale)


def _cheb_lstsq(ts: np.ndarray, xs: np.ndarray, degree: int, span: float):
    """Least-squares fit in a Chebyshev basis mapped onto [0, span]."""
    u = 2.0 * ts / span - 1.0
    V = _cheb.chebvander(u, degree)
    sol, *_ = np.linalg.lstsq(V, xs, rcond=None)
    return sol, V


def fit_trajectory(
    samples_t: np.ndarray,
    samples_x: np.ndarray,
    degree: int | None = None,
    time_scale: float | None = None,
    max_degree: int = DEFAULT_MAX_FIT_DEGREE,
    rtol: float = DEFAULT_FIT_RTOL,
) -> PolyTrajectory:
    """Per-component least-squares polynomial fit of sampled positions.

    With degree=None, picks the smallest degree <= max_degree whose RMS
    residual is below rtol times the bounding-box diagonal of the samples.
    The fit is computed in a Chebyshev basis on the scaled time interval and
    converted to power form; the analytic derivative of the fit serves as the
    velocity target downstream.
    """
    ts = np.asarray(samples_t, dtype=float)
    xs = np.asarray(samples_x, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if ts.ndim != 1 or len(ts) != len(xs):
        raise ValueError("need matching 1-d times and (m, n) positions")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("sample times must be strictly increasing")
    if ts[0] < 0:
        raise ValueError("sample times must be nonnegative")
    horizon = float(ts[-1])
    if horizon <= 0:
        raise ValueError("trajectory horizon must be positive")
    scale = float(time_scale) if time_scale is not None else horizon
    span = horizon / scale
    s = ts / scale

    def fit_at(deg: int) -> tuple[tuple[UniPoly, ...], float]:
        if len(ts) < deg + 1:
            raise ValueError(
                f"need at least {deg + 1} samples for a degree-{deg} fit, got {len(ts)}"
            )
        sol, V = _cheb_lstsq(s, xs, deg, span)
        resid = xs - V @ sol
        rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
        comps = []
        for j in range(xs.shape[1]):
            series = _cheb.Chebyshev(sol[:, j], domain=[0.0, span])
            power = series.convert(kind=np.polynomial.Polynomial)
            comps.append(UniPoly(power.coef))
        return tuple(comps), rms

    n = xs.shape[1]
    if degree is not None:
        comps, rms = fit_at(int(degree))
        return PolyTrajectory(n, horizon, scale, comps, rms)

    diag = float(np.linalg.norm(xs.max(axis=0) - xs.min(axis=0)))
    target = rtol * diag if diag > 0 else rtol
    best = None
    for deg in range(1, max_degree + 1):
        if len(ts) < deg + 1:
            break
        comps, rms = fit_at(deg)
        best = (comps, rms)
        if rms < target:
            break
    if best is None:
        raise ValueError("not enough samples for any fit")
    comps, rms = best
    return PolyTrajectory(n, horizon, scale, comps, rms)
