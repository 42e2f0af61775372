"""Sum-of-squares certificates for symmetric matrix polynomials on an interval.

A symmetric matrix polynomial P(t) is PSD everywhere on [0, T] exactly when it
splits into weighted sums of squares with interval weights:

    deg P odd,  = 2e+1:   P = t V(t) + (T - t) W(t),   deg V, W <= 2e
    deg P even, = 2e:     P = V(t) + t (T - t) W(t),   deg V <= 2e, deg W <= 2e-2

with V, W sums of squares (Gram-representable with PSD Gram matrices). The
univariate case has no relaxation gap, so SOS feasibility here is a decision
procedure for interval positivity. Emitting the identity at a degree cap at
least the actual degree keeps it exact: a representation at the true degree
extends to the cap through s = s^2 + s(1-s) and (1-s) = (1-s)^2 + s(1-s).

The compiler works on [0, 1] (inputs are rescaled exactly) and matches
coefficients in the shifted Chebyshev basis T_p(2s - 1): an invertible
recombination of monomial matching, so feasibility is unchanged, but every
equality row stays on the scale of the polynomial's values. Gram blocks are
parameterized in a shifted Chebyshev product basis by default for the same
reason. Certificate audits compare values at Chebyshev nodes rather than
high-degree power coefficients, which would cancel catastrophically.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, cached_property

import numpy as np
import numpy.polynomial.polynomial as npoly

from cvfields.conic import (
    ConeProgramBuilder,
    ConeSolution,
    SolverSettings,
    smat,
    svec_dim,
    solve,
)
from cvfields.polyalg import UniPolyMatrix

__all__ = [
    "CHEBYSHEV",
    "MONOMIAL",
    "LinearMatrixPolynomial",
    "SampledMatrixFamily",
    "IntervalSOSStructure",
    "SOSBlockHandle",
    "GramDecomposition",
    "CertificateCheck",
    "SOSMResult",
    "append_sosm_constraint",
    "extract_certificate",
    "sosm_on_interval",
    "sosm_sample_times",
    "verify_certificate",
    "verify_certificate_values",
    "min_eig_on_grid",
]

CHEBYSHEV = "chebyshev"
MONOMIAL = "monomial"


@lru_cache(maxsize=None)
def _shifted_cheb_int(m: int) -> tuple[int, ...]:
    """Power coefficients of T_m(2s - 1), exact integers."""
    if m == 0:
        return (1,)
    if m == 1:
        return (-1, 2)
    pm1 = _shifted_cheb_int(m - 1)
    pm2 = _shifted_cheb_int(m - 2)
    out = [0] * (m + 1)
    # T_m = 2 (2s - 1) T_{m-1} - T_{m-2}
    for i, c in enumerate(pm1):
        out[i + 1] += 4 * c
        out[i] -= 2 * c
    for i, c in enumerate(pm2):
        out[i] -= c
    return tuple(out)


@lru_cache(maxsize=None)
def _basis_power(kind: str, a: int) -> tuple[float, ...]:
    if kind == MONOMIAL:
        return (0.0,) * a + (1.0,)
    if kind == CHEBYSHEV:
        return tuple(float(v) for v in _shifted_cheb_int(a))
    raise ValueError(f"unknown gram basis {kind!r}")


@lru_cache(maxsize=None)
def _pair_product_power(kind: str, a: int, b: int) -> tuple[float, ...]:
    """Power coefficients of beta_a * beta_b on [0, 1]."""
    if kind == MONOMIAL:
        return (0.0,) * (a + b) + (1.0,)
    # product identity keeps Chebyshev pair products exact
    hi = _shifted_cheb_int(a + b)
    lo = _shifted_cheb_int(abs(a - b))
    out = [0.0] * (a + b + 1)
    for i, c in enumerate(hi):
        out[i] += c / 2.0
    for i, c in enumerate(lo):
        out[i] += c / 2.0
    return tuple(out)


@lru_cache(maxsize=None)
def _weight_table(kind: str, g: int, mult: tuple[float, ...], out_len: int) -> np.ndarray:
    """W[a, b, p] = coeff of s^p in mult(s) * beta_a(s) * beta_b(s)."""
    W = np.zeros((g + 1, g + 1, out_len))
    m = np.asarray(mult)
    for a in range(g + 1):
        for b in range(a + 1):
            prod = np.convolve(m, np.asarray(_pair_product_power(kind, a, b)))
            W[a, b, : len(prod)] = prod
            W[b, a, : len(prod)] = prod
    W.setflags(write=False)
    return W


def _cheb_mul(ea: dict[int, float], eb: dict[int, float]) -> dict[int, float]:
    # T_p T_q = (T_{p+q} + T_{|p-q|}) / 2, all weights dyadic
    out: dict[int, float] = {}
    for p, va in ea.items():
        for q, vb in eb.items():
            w = 0.5 * va * vb
            for r in (p + q, abs(p - q)):
                out[r] = out.get(r, 0.0) + w
    return out


@lru_cache(maxsize=None)
def _power_in_cheb(k: int) -> tuple[tuple[int, float], ...]:
    """Shifted Chebyshev expansion of s^k, exact dyadic weights."""
    if k == 0:
        return ((0, 1.0),)
    prev = dict(_power_in_cheb(k - 1))
    out = _cheb_mul(prev, {0: 0.5, 1: 0.5})  # s = (T0 + T1) / 2
    return tuple(sorted(out.items()))


def _expansion_from_power(coeffs: tuple[float, ...]) -> dict[int, float]:
    out: dict[int, float] = {}
    for k, c in enumerate(coeffs):
        if c == 0.0:
            continue
        for p, w in _power_in_cheb(k):
            out[p] = out.get(p, 0.0) + c * w
    return out


@lru_cache(maxsize=None)
def _pair_product_cheb(kind: str, a: int, b: int) -> tuple[tuple[int, float], ...]:
    """Shifted Chebyshev coordinates of beta_a * beta_b."""
    if kind == MONOMIAL:
        return _power_in_cheb(a + b)
    if kind == CHEBYSHEV:
        out: dict[int, float] = {}
        for r in (a + b, abs(a - b)):
            out[r] = out.get(r, 0.0) + 0.5
        return tuple(sorted(out.items()))
    raise ValueError(f"unknown gram basis {kind!r}")


@lru_cache(maxsize=None)
def _cheb_weight_table(kind: str, g: int, mult: tuple[float, ...], out_len: int) -> np.ndarray:
    """W[a, b, p] = coeff of T_p(2s - 1) in mult(s) * beta_a(s) * beta_b(s)."""
    W = np.zeros((g + 1, g + 1, out_len))
    mexp = _expansion_from_power(mult)
    for a in range(g + 1):
        for b in range(a + 1):
            prod = _cheb_mul(dict(_pair_product_cheb(kind, a, b)), mexp)
            for p, w in prod.items():
                W[a, b, p] = w
                W[b, a, p] = w
    W.setflags(write=False)
    return W


def _cheb_nodes(q: int) -> np.ndarray:
    """Chebyshev points of the first kind mapped to [0, 1]."""
    k = np.arange(q)
    return 0.5 * (np.cos((2 * k + 1) * np.pi / (2 * q)) + 1.0)


def _basis_values(kind: str, g: int, s: np.ndarray) -> np.ndarray:
    """B[a, n] = beta_a(s_n); stable evaluation for both gram bases."""
    if kind == MONOMIAL:
        return np.vander(s, g + 1, increasing=True).T
    u = np.clip(2.0 * s - 1.0, -1.0, 1.0)
    return np.cos(np.outer(np.arange(g + 1), np.arccos(u)))


def _cheb_stack(P: "UniPolyMatrix", length: int) -> np.ndarray:
    """Shifted Chebyshev coefficient stack of P, via exact node interpolation.

    Returns C with C[p] the T_p(2s - 1) coefficient matrix; exact for
    entries of degree < length up to roundoff of the node evaluation.
    """
    s = _cheb_nodes(length)
    vals = np.moveaxis(npoly.polyval(s, P.coeffs), -1, 0)  # (q, k, k)
    return _cheb_from_values(vals)


@dataclass(frozen=True)
class _BlockSpec:
    label: str
    gram_degree: int  # univariate degree of the square-root basis
    multiplier: tuple[float, ...]  # interval weight, power coefficients


def _interval_blocks(degree: int) -> tuple[_BlockSpec, ...]:
    if degree == 0:
        return (_BlockSpec("V", 0, (1.0,)),)
    if degree % 2 == 1:
        e = (degree - 1) // 2
        return (
            _BlockSpec("V", e, (0.0, 1.0)),  # weight s
            _BlockSpec("W", e, (1.0, -1.0)),  # weight 1 - s
        )
    e = degree // 2
    return (
        _BlockSpec("V", e, (1.0,)),
        _BlockSpec("W", e - 1, (0.0, 1.0, -1.0)),  # weight s (1 - s)
    )


def _svec_index(r: int, c: int) -> int:
    # column-major upper triangle, matching conic.svec
    lo, hi = (r, c) if r <= c else (c, r)
    return hi * (hi + 1) // 2 + lo


_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class IntervalSOSStructure:
    """Gram layout certifying a size-k degree-d matrix polynomial on [0, 1]."""

    size: int
    degree: int
    gram_basis: str = CHEBYSHEV

    def __post_init__(self):
        if self.size < 1 or self.degree < 0:
            raise ValueError("need size >= 1 and degree >= 0")
        if self.gram_basis not in (CHEBYSHEV, MONOMIAL):
            raise ValueError(f"unknown gram basis {self.gram_basis!r}")

    @cached_property
    def blocks(self) -> tuple[_BlockSpec, ...]:
        return _interval_blocks(self.degree)

    def gram_matrix_size(self, block: int) -> int:
        return self.size * (self.blocks[block].gram_degree + 1)

    @property
    def n_equalities(self) -> int:
        return (self.degree + 1) * self.size * (self.size + 1) // 2

    def weights(self, block: int, rep: str = "power") -> np.ndarray:
        """W[a, b, p]: contribution of Gram entry (a, b) to the p-th coefficient.

        rep selects the coefficient coordinates the rows are expressed in:
        "power" for s^p, "cheb" for T_p(2s - 1).
        """
        spec = self.blocks[block]
        if rep == "power":
            return _weight_table(
                self.gram_basis, spec.gram_degree, spec.multiplier, self.degree + 1
            )
        if rep == "cheb":
            return _cheb_weight_table(
                self.gram_basis, spec.gram_degree, spec.multiplier, self.degree + 1
            )
        raise ValueError(f"unknown coefficient representation {rep!r}")

    def row_entries(self, p: int, i: int, j: int, rep: str = "power"):
        """Yield (block, svec_index, weight) for the p-th (i, j) coefficient."""
        k = self.size
        for bi in range(len(self.blocks)):
            W = self.weights(bi, rep)
            g = self.blocks[bi].gram_degree
            acc: dict[int, float] = {}
            for a in range(g + 1):
                for b in range(g + 1):
                    w = W[a, b, p]
                    if w == 0.0:
                        continue
                    r = a * k + i
                    c = b * k + j
                    scale = 1.0 if r == c else _INV_SQRT2
                    idx = _svec_index(r, c)
                    acc[idx] = acc.get(idx, 0.0) + w * scale
            for idx, w in acc.items():
                if w != 0.0:
                    yield bi, idx, w

    def reconstruct(self, grams: tuple[np.ndarray, ...]) -> UniPolyMatrix:
        """Coefficient stack on [0, 1] implied by the Gram matrices."""
        k = self.size
        coeffs = np.zeros((self.degree + 1, k, k))
        for bi, G in enumerate(grams):
            W = self.weights(bi)
            g = self.blocks[bi].gram_degree
            if G.shape != (k * (g + 1), k * (g + 1)):
                raise ValueError("gram matrix shape mismatch")
            for a in range(g + 1):
                for b in range(g + 1):
                    blk = G[a * k : (a + 1) * k, b * k : (b + 1) * k]
                    coeffs += W[a, b][:, None, None] * blk[None, :, :]
        return UniPolyMatrix(0.5 * (coeffs + np.swapaxes(coeffs, 1, 2)))


@dataclass(frozen=True)
class LinearMatrixPolynomial:
    """Affine family P(t; theta) = const(t) + sum_v theta_v * coeffs[v](t)."""

    const: UniPolyMatrix
    coeffs: tuple[UniPolyMatrix, ...] = ()

    def __post_init__(self):
        k = self.const.size
        if any(c.size != k for c in self.coeffs):
            raise ValueError("all coefficient matrices must share the size")
        object.__setattr__(self, "coeffs", tuple(self.coeffs))

    @property
    def size(self) -> int:
        return self.const.size

    @property
    def n_theta(self) -> int:
        return len(self.coeffs)

    @property
    def degree(self) -> int:
        return max([self.const.degree] + [c.degree for c in self.coeffs])

    def at(self, theta: np.ndarray) -> UniPolyMatrix:
        out = self.const
        for v, c in zip(theta, self.coeffs):
            if v != 0.0:
                out = out + float(v) * c
        return out

    def rescale_time(self, factor: float) -> "LinearMatrixPolynomial":
        return LinearMatrixPolynomial(
            self.const.rescale_time(factor),
            tuple(c.rescale_time(factor) for c in self.coeffs),
        )


@dataclass(frozen=True)
class SampledMatrixFamily:
    """Affine family given by values at the Chebyshev nodes of [0, horizon].

    The nodes must be sosm_sample_times(degree, horizon); degree is the true
    polynomial degree of the family, so the values pin it exactly. This is
    the high-degree entry path: compositions evaluated pointwise stay on the
    scale of the data, where expanded power coefficients would explode.

    const_values: (degree + 1, k, k); coeff_values: (n_theta, degree + 1, k, k).
    """

    const_values: np.ndarray
    coeff_values: np.ndarray
    degree: int
    horizon: float

    def __post_init__(self):
        cv = np.asarray(self.const_values, dtype=float)
        tv = np.asarray(self.coeff_values, dtype=float)
        q = self.degree + 1
        if cv.ndim != 3 or cv.shape[0] != q or cv.shape[1] != cv.shape[2]:
            raise ValueError("const_values must be (degree + 1, k, k)")
        if tv.ndim != 4 or tv.shape[1:] != cv.shape:
            raise ValueError("coeff_values must be (n_theta, degree + 1, k, k)")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "const_values", cv)
        object.__setattr__(self, "coeff_values", tv)

    @property
    def size(self) -> int:
        return self.const_values.shape[1]

    @property
    def n_theta(self) -> int:
        return self.coeff_values.shape[0]


def sosm_sample_times(degree: int, horizon: float) -> np.ndarray:
    """Times a SampledMatrixFamily must be evaluated at for this degree."""
    return _cheb_nodes(degree + 1) * horizon


def _cheb_from_values(values: np.ndarray) -> np.ndarray:
    """Chebyshev coefficient stack from values at _cheb_nodes(q), q = len."""
    q = values.shape[0]
    angles = np.outer(np.arange(q), (2.0 * np.arange(q) + 1.0) * np.pi / (2.0 * q))
    M = np.cos(angles)
    C = (2.0 / q) * np.einsum("pn,n...->p...", M, values)
    C[0] *= 0.5
    return C


@dataclass(frozen=True)
class SOSBlockHandle:
    structure: IntervalSOSStructure
    horizon: float
    gram_cols: tuple[np.ndarray, ...]  # svec variable columns per block
    eq_row: int  # first equality row


def _coeff_stack(P: UniPolyMatrix, length: int) -> np.ndarray:
    out = np.zeros((length, P.size, P.size))
    out[: P.coeffs.shape[0]] = P.coeffs
    return out


def append_sosm_constraint(
    builder: ConeProgramBuilder,
    family: LinearMatrixPolynomial | SampledMatrixFamily,
    theta_cols: np.ndarray,
    horizon: float,
    degree: int | None = None,
    gram_basis: str = CHEBYSHEV,
) -> SOSBlockHandle:
    """Emit rows forcing family(t; theta) to be SOS on [0, horizon].

    theta_cols are the builder columns holding theta, one per family
    coefficient. Adds Gram variables, coefficient-matching equality rows, and
    PSD cone rows; returns a handle for certificate extraction. A sampled
    family must carry values at sosm_sample_times(family.degree, horizon).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if len(theta_cols) != family.n_theta:
        raise ValueError("theta column count does not match the family")
    sampled = isinstance(family, SampledMatrixFamily)
    if sampled:
        if abs(family.horizon - horizon) > 1e-12 * max(1.0, abs(horizon)):
            raise ValueError("sampled family horizon disagrees")
        fam_degree = family.degree
    else:
        family = family.rescale_time(horizon)  # now on [0, 1]
        fam_degree = family.degree
    d = fam_degree if degree is None else int(degree)
    if d < fam_degree:
        raise ValueError(f"degree cap {d} below family degree {fam_degree}")
    k = family.size
    struct = IntervalSOSStructure(k, d, gram_basis)

    gram_cols = []
    for bi in range(len(struct.blocks)):
        size = struct.gram_matrix_size(bi)
        gram_cols.append(builder.add_vars(svec_dim(size)))

    # Chebyshev-coordinate rows: same equalities up to an invertible basis
    # change, but row magnitudes track polynomial values instead of exploding
    # with degree, which keeps the equilibrated solve honest in raw units.
    if sampled:
        # node values of the unit-rescaled family are the given node values
        def pad(stack):
            if d + 1 == stack.shape[0]:
                return stack
            out = np.zeros((d + 1,) + stack.shape[1:])
            out[: stack.shape[0]] = stack
            return out

        const_stack = pad(_cheb_from_values(family.const_values))
        coeff_stacks = [pad(_cheb_from_values(v)) for v in family.coeff_values]
    else:
        const_stack = _cheb_stack(family.const, d + 1)
        coeff_stacks = [_cheb_stack(c, d + 1) for c in family.coeffs]

    eq_row = builder.add_cone("zero", struct.n_equalities)
    row = eq_row
    for p in range(d + 1):
        for j in range(k):
            for i in range(j + 1):
                for bi, sidx, w in struct.row_entries(p, i, j, rep="cheb"):
                    builder.add_entry(row, int(gram_cols[bi][sidx]), w)
                for v, col in enumerate(theta_cols):
                    builder.add_entry(row, int(col), -coeff_stacks[v][p, i, j])
                builder.set_rhs(row, const_stack[p, i, j])
                row += 1

    for bi, cols in enumerate(gram_cols):
        size = struct.gram_matrix_size(bi)
        ofs = builder.add_cone("psd", size)
        for t, col in enumerate(cols):
            builder.add_entry(ofs + t, int(col), -1.0)

    return SOSBlockHandle(struct, float(horizon), tuple(gram_cols), eq_row)


@dataclass(frozen=True)
class GramDecomposition:
    """Interval SOS certificate: labelled Gram matrices plus the layout."""

    structure: IntervalSOSStructure
    horizon: float
    grams: tuple[np.ndarray, ...]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(b.label for b in self.structure.blocks)

    def reconstruct(self) -> UniPolyMatrix:
        """The certified matrix polynomial, in physical time on [0, horizon].

        Power-basis assembly; fine at moderate degree but prefer values() for
        audits, which stays stable at any degree.
        """
        unit = self.structure.reconstruct(self.grams)
        return unit.rescale_time(1.0 / self.horizon)

    def values(self, t: np.ndarray) -> np.ndarray:
        """Certified polynomial evaluated at physical times t, shape (n, k, k).

        Evaluates z(s)^T G z(s) directly from basis values, so no high-degree
        coefficient arithmetic is involved.
        """
        s = np.asarray(t, dtype=float) / self.horizon
        k = self.structure.size
        out = np.zeros((s.size, k, k))
        for spec, G in zip(self.structure.blocks, self.grams):
            g1 = spec.gram_degree + 1
            B = _basis_values(self.structure.gram_basis, spec.gram_degree, s)
            mult = npoly.polyval(s, np.asarray(spec.multiplier))
            G4 = G.reshape(g1, k, g1, k)
            out += mult[:, None, None] * np.einsum("an,aibj,bn->nij", B, G4, B)
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def min_gram_eig(self) -> float:
        return min(float(np.linalg.eigvalsh(G)[0]) for G in self.grams)


def extract_certificate(handle: SOSBlockHandle, x: np.ndarray) -> GramDecomposition:
    grams = tuple(smat(x[cols]) for cols in handle.gram_cols)
    return GramDecomposition(handle.structure, handle.horizon, grams)


@dataclass(frozen=True)
class CertificateCheck:
    ok: bool
    failure: str | None
    recon_error: float
    min_gram_eig: float


def verify_certificate(
    P: UniPolyMatrix,
    cert: GramDecomposition,
    recon_rtol: float = 1e-8,
    eig_tol: float = 1e-7,
) -> CertificateCheck:
    """Audit a certificate against P; reports the first failed check.

    Eigenvalue checks run on the Gram matrices; the reconstruction check
    compares values at Chebyshev nodes (enough to pin the polynomial) so the
    audit stays meaningful at degrees where power coefficients cancel badly.
    """
    struct = cert.structure
    if P.size != struct.size:
        return CertificateCheck(False, "size mismatch", np.inf, -np.inf)
    min_eig = np.inf
    for label, G in zip(cert.labels, cert.grams):
        if not np.allclose(G, G.T, atol=1e-9 * max(1.0, np.abs(G).max())):
            return CertificateCheck(False, f"gram {label} not symmetric", np.inf, -np.inf)
        w = float(np.linalg.eigvalsh(G)[0])
        min_eig = min(min_eig, w)
        if w < -eig_tol:
            return CertificateCheck(False, f"gram {label} has eigenvalue {w:.3e}", np.inf, w)
    q = 2 * (max(struct.degree, P.degree) + 1)
    times = _cheb_nodes(q) * cert.horizon
    pvals = np.moveaxis(npoly.polyval(times, P.coeffs), -1, 0)
    cvals = cert.values(times)
    scale = max(1.0, float(np.abs(pvals).max()))
    err = float(np.abs(cvals - pvals).max()) / scale
    if err > recon_rtol:
        return CertificateCheck(False, f"reconstruction error {err:.3e}", err, min_eig)
    return CertificateCheck(True, None, err, min_eig)


def verify_certificate_values(
    times: np.ndarray,
    values: np.ndarray,
    cert: GramDecomposition,
    recon_rtol: float = 1e-8,
    eig_tol: float = 1e-7,
) -> CertificateCheck:
    """Audit a certificate against externally evaluated target values.

    values[i] is the target polynomial at times[i] (physical time). Supply at
    least degree + 1 distinct times so agreement pins the polynomial; times
    independent of the construction nodes make the audit a genuine cross-check.
    """
    values = np.asarray(values, dtype=float)
    struct = cert.structure
    if values.ndim != 3 or values.shape[1:] != (struct.size, struct.size):
        return CertificateCheck(False, "value shape mismatch", np.inf, -np.inf)
    if len(times) < struct.degree + 1:
        return CertificateCheck(False, "too few audit times", np.inf, -np.inf)
    min_eig = np.inf
    for label, G in zip(cert.labels, cert.grams):
        if not np.allclose(G, G.T, atol=1e-9 * max(1.0, np.abs(G).max())):
            return CertificateCheck(False, f"gram {label} not symmetric", np.inf, -np.inf)
        w = float(np.linalg.eigvalsh(G)[0])
        min_eig = min(min_eig, w)
        if w < -eig_tol:
            return CertificateCheck(False, f"gram {label} has eigenvalue {w:.3e}", np.inf, w)
    cvals = cert.values(np.asarray(times, dtype=float))
    scale = max(1.0, float(np.abs(values).max()))
    err = float(np.abs(cvals - values).max()) / scale
    if err > recon_rtol:
        return CertificateCheck(False, f"reconstruction error {err:.3e}", err, min_eig)
    return CertificateCheck(True, None, err, min_eig)


@dataclass(frozen=True)
class SOSMResult:
    margin: float  # largest lambda with P - lambda I SOS on the interval
    feasible: bool  # margin >= 0, i.e. P is PSD on the interval
    certificate: GramDecomposition | None
    solution: ConeSolution


def sosm_on_interval(
    P: UniPolyMatrix,
    horizon: float,
    degree: int | None = None,
    gram_basis: str = CHEBYSHEV,
    settings: SolverSettings | None = None,
) -> SOSMResult:
    """Decide interval positivity of a fixed P by maximizing the margin.

    Solves max lambda s.t. P - lambda I is SOS on [0, horizon]; the optimum
    equals the minimum eigenvalue of P over the interval (the relaxation is
    exact), so the sign of the margin decides PSD-ness. When the margin is
    nonnegative a certificate for P itself is returned (Gram matrices shifted
    back by the margin).
    """
    st = settings or SolverSettings(accuracy=1e-9)
    builder = ConeProgramBuilder()
    lam = builder.add_vars(1)
    eye = UniPolyMatrix.constant(-np.eye(P.size))
    family = LinearMatrixPolynomial(P, (eye,))
    handle = append_sosm_constraint(
        builder, family, lam, horizon, degree=degree, gram_basis=gram_basis
    )
    builder.add_objective(int(lam[0]), -1.0)  # maximize lambda
    sol = solve(builder.build(), st)
    margin = float(sol.x[lam[0]]) if np.isfinite(sol.x[lam[0]]) else -np.inf

    cert = None
    if sol.status == "optimal" and margin >= 0:
        raw = extract_certificate(handle, sol.x)
        k = P.size
        shifted = []
        for spec, G in zip(raw.structure.blocks, raw.grams):
            H = G.copy()
            if raw.structure.degree % 2 == 1 or spec.label == "V":
                # constant shift enters through the beta_0 x beta_0 block
                H[:k, :k] += margin * np.eye(k)
            shifted.append(H)
        cert = GramDecomposition(raw.structure, raw.horizon, tuple(shifted))
    return SOSMResult(
        margin=margin,
        feasible=sol.status == "optimal" and margin >= 0,
        certificate=cert,
        solution=sol,
    )


def min_eig_on_grid(P: UniPolyMatrix, horizon: float, num: int = 10_000):
    """Smallest eigenvalue of P(t) over a uniform grid; ties take smallest t."""
    ts = np.linspace(0.0, horizon, num)
    vals = np.empty(num)
    for idx, t in enumerate(ts):
        vals[idx] = np.linalg.eigvalsh(P(t))[0]
    best = int(np.argmin(vals))
    return float(vals[best]), float(ts[best])
