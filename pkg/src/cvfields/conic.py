"""Operator-splitting solver for cone programs in standard form

    minimize    c'x
    subject to  Ax + s = b,   s in K,

with K an ordered product of zero, nonnegative, second-order, and PSD cones.
PSD blocks enter in scaled-vectorized form (off-diagonals times sqrt(2)) so
the cone inner product matches the Frobenius inner product.

The algorithm is ADMM on the homogeneous self-dual embedding: one sparse
linear solve (factored once) plus cone projections per iteration. Runs are
deterministic for identical inputs and settings.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Cone",
    "ConeProgram",
    "ConeProgramBuilder",
    "ConeSolution",
    "SolverSettings",
    "solve",
    "project_psd",
    "project_soc",
    "svec",
    "smat",
    "svec_dim",
    "cone_program_to_json",
    "cone_program_from_json",
]

CONE_KINDS = ("zero", "nonneg", "soc", "psd")


@dataclass(frozen=True)
class Cone:
    """One cone block: kind and its natural size (matrix dim for psd)."""

    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in CONE_KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("cone size must be positive")

    @property
    def rows(self) -> int:
        """Number of rows this block occupies in A."""
        if self.kind == "psd":
            return self.size * (self.size + 1) // 2
        return self.size


def svec_dim(k: int) -> int:
    return k * (k + 1) // 2


_SQRT2 = np.sqrt(2.0)


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled upper-triangle vectorization, column order, off-diag * sqrt2."""
    k = M.shape[0]
    out = np.empty(svec_dim(k))
    idx = 0
    for j in range(k):
        for i in range(j + 1):
            out[idx] = M[i, j] * (1.0 if i == j else _SQRT2)
            idx += 1
    return out


def smat(v: np.ndarray) -> np.ndarray:
    """Inverse of svec."""
    m = len(v)
    k = int((np.sqrt(8 * m + 1) - 1) / 2)
    if svec_dim(k) != m:
        raise ValueError(f"length {m} is not a triangular number")
    M = np.empty((k, k))
    idx = 0
    for j in range(k):
        for i in range(j + 1):
            val = v[idx]
            if i == j:
                M[i, j] = val
            else:
                M[i, j] = M[j, i] = val / _SQRT2
            idx += 1
    return M


def project_psd(M: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD matrix: clamp negative eigenvalues to zero."""
    Msym = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(Msym)
    if w[0] >= 0:
        return Msym
    w = np.clip(w, 0.0, None)
    return (V * w) @ V.T


def project_soc(v: np.ndarray) -> np.ndarray:
    """Projection onto {(t, z) : ||z||_2 <= t}; v of size >= 1."""
    v = np.asarray(v, dtype=float)
    if v.size == 1:
        return np.maximum(v, 0.0)
    t, z = v[0], v[1:]
    nz = float(np.linalg.norm(z))
    if nz <= t:
        return v.copy()
    if nz <= -t:
        return np.zeros_like(v)
    alpha = 0.5 * (t + nz)
    out = np.empty_like(v)
    out[0] = alpha
    out[1:] = alpha / nz * z
    return out


@dataclass(frozen=True)
class ConeProgram:
    A: sp.spmatrix
    b: np.ndarray
    c: np.ndarray
    cones: tuple[Cone, ...]
    warm_start: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None  # (x, y, s)

    def __post_init__(self):
        A = sp.csc_matrix(self.A)
        b = np.asarray(self.b, dtype=float)
        c = np.asarray(self.c, dtype=float)
        m = sum(k.rows for k in self.cones)
        if A.shape != (m, len(c)) or len(b) != m:
            raise ValueError(
                f"inconsistent program: A is {A.shape}, |b|={len(b)}, |c|={len(c)}, "
                f"cones total {m} rows"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "cones", tuple(self.cones))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class ConeSolution:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    status: str  # optimal | infeasible | unbounded | iteration-limit
    primal_res: float
    dual_res: float
    gap: float
    iterations: int
    wall_time: float
    objective: float

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass(frozen=True)
class SolverSettings:
    accuracy: float = 1e-6
    max_iters: int = 25_000
    equilibrate: bool = True
    ruiz_iters: int = 10
    check_every: int = 25
    relax_alpha: float = 1.5  # over-relaxation, 1.0 disables
    aa_memory: int = 10  # Anderson acceleration window, 0 disables
    eq_scale: float = 10.0  # extra weight on zero-cone rows, 1.0 disables
    adaptive_scale: bool = True  # rebalance b/c on residual imbalance
    verbose: bool = False  # residual trace on stderr at each check


def _block_slices(cones: tuple[Cone, ...]):
    out = []
    ofs = 0
    for k in cones:
        out.append((k, slice(ofs, ofs + k.rows)))
        ofs += k.rows
    return out


def _project_dual_cone(y: np.ndarray, blocks) -> np.ndarray:
    """Project onto K* (zero cone rows are free in the dual)."""
    out = y.copy()
    for cone, sl in blocks:
        if cone.kind == "zero":
            continue
        elif cone.kind == "nonneg":
            np.maximum(out[sl], 0.0, out=out[sl])
        elif cone.kind == "soc":
            out[sl] = project_soc(out[sl])
        else:
            out[sl] = svec(project_psd(smat(out[sl])))
    return out


class _Anderson:
    """Safeguarded type-II Anderson acceleration of a fixed-point map.

    Mixes the last few map outputs to kill the 1/k tail of plain splitting;
    restarts whenever the residual grows, which keeps plain ADMM as the
    fallback. Normal equations on an incrementally maintained Gram matrix,
    so the per-iteration overhead is a few dot products.
    """

    def __init__(self, memory: int):
        self.memory = memory
        self.dG: list[np.ndarray] = []  # map output differences
        self.dR: list[np.ndarray] = []  # residual differences
        self.gram = np.zeros((0, 0))
        self.prev_w: np.ndarray | None = None
        self.prev_r: np.ndarray | None = None
        self.prev_norm = np.inf

    def _reset(self):
        self.dG.clear()
        self.dR.clear()
        self.gram = np.zeros((0, 0))
        self.prev_w = None
        self.prev_r = None

    def propose(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Next iterate from input w and map output g = T(w)."""
        r = g - w
        rnorm = float(np.linalg.norm(r))
        if rnorm > self.prev_norm:
            self._reset()
        if self.prev_w is not None:
            dr = r - self.prev_r
            self.dG.append(g - self.prev_w - self.prev_r)  # g - g_prev
            self.dR.append(dr)
            cross = np.array([dr @ other for other in self.dR])
            k = len(self.dR)
            G = np.zeros((k, k))
            G[:-1, :-1] = self.gram
            G[-1, :] = cross
            G[:, -1] = cross
            self.gram = G
            if k > self.memory:
                self.dG.pop(0)
                self.dR.pop(0)
                self.gram = self.gram[1:, 1:]
        self.prev_w = w
        self.prev_r = r
        self.prev_norm = rnorm
        if not self.dR:
            return g
        rhs = np.array([col @ r for col in self.dR])
        reg = 1e-12 * max(float(np.trace(self.gram)), 1e-12)
        try:
            gamma = np.linalg.solve(self.gram + reg * np.eye(len(rhs)), rhs)
        except np.linalg.LinAlgError:
            self._reset()
            return g
        out = g.copy()
        for coef, col in zip(gamma, self.dG):
            out -= coef * col
        if not np.all(np.isfinite(out)):
            self._reset()
            return g
        return out


class _DualProjector:
    """Batched dual-cone projection: psd blocks of equal size share one eigh."""

    def __init__(self, blocks):
        self.nonneg = [sl for cone, sl in blocks if cone.kind == "nonneg"]
        self.soc = [sl for cone, sl in blocks if cone.kind == "soc"]
        groups: dict[int, list[slice]] = {}
        for cone, sl in blocks:
            if cone.kind == "psd":
                groups.setdefault(cone.size, []).append(sl)
        self.psd = []
        for k, slices in groups.items():
            rows = np.concatenate([np.arange(j + 1) for j in range(k)])
            cols = np.concatenate([np.full(j + 1, j) for j in range(k)])
            scale = np.where(rows == cols, 1.0, _SQRT2)
            self.psd.append((k, slices, rows, cols, scale))

    def __call__(self, y: np.ndarray) -> np.ndarray:
        out = y.copy()
        for sl in self.nonneg:
            np.maximum(out[sl], 0.0, out=out[sl])
        for sl in self.soc:
            out[sl] = project_soc(out[sl])
        for k, slices, rows, cols, scale in self.psd:
            V = np.stack([out[sl] for sl in slices])
            M = np.zeros((len(slices), k, k))
            M[:, rows, cols] = V / scale
            M[:, cols, rows] = M[:, rows, cols]
            w, U = np.linalg.eigh(M)
            np.clip(w, 0.0, None, out=w)
            P = (U * w[:, None, :]) @ U.transpose(0, 2, 1)
            flat = P[:, rows, cols] * scale
            for i, sl in enumerate(slices):
                out[sl] = flat[i]
        return out


def _project_primal_cone(s: np.ndarray, blocks) -> np.ndarray:
    out = s.copy()
    for cone, sl in blocks:
        if cone.kind == "zero":
            out[sl] = 0.0
        elif cone.kind == "nonneg":
            np.maximum(out[sl], 0.0, out=out[sl])
        elif cone.kind == "soc":
            out[sl] = project_soc(out[sl])
        else:
            out[sl] = svec(project_psd(smat(out[sl])))
    return out


def _ruiz_equilibrate(A: sp.csc_matrix, blocks, iters: int):
    """Blockwise Ruiz scaling; rows of one cone block share a factor."""
    m, n = A.shape
    D = np.ones(m)
    E = np.ones(n)
    M = A.copy().tocsr()
    for _ in range(iters):
        row_max = np.zeros(m)
        absM = abs(M)
        rmax = absM.max(axis=1).toarray().ravel()
        # uniform factor inside soc/psd blocks keeps cone geometry intact
        for cone, sl in blocks:
            if cone.kind in ("soc", "psd"):
                blk = rmax[sl]
                val = blk.max() if blk.size else 0.0
                row_max[sl] = val
            else:
                row_max[sl] = rmax[sl]
        cmax = absM.max(axis=0).toarray().ravel()
        d = 1.0 / np.sqrt(np.where(row_max > 0, row_max, 1.0))
        e = 1.0 / np.sqrt(np.where(cmax > 0, cmax, 1.0))
        M = sp.diags(d) @ M @ sp.diags(e)
        D *= d
        E *= e
    return M.tocsc(), D, E


def solve(prog: ConeProgram, settings: SolverSettings | None = None) -> ConeSolution:
    """Solve a cone program; never raises on numerical trouble, reports status."""
    st = settings or SolverSettings()
    t0 = time.perf_counter()
    m, n = prog.m, prog.n
    blocks = _block_slices(prog.cones)

    if st.equilibrate and prog.A.nnz > 0:
        Ah, D, E = _ruiz_equilibrate(prog.A, blocks, st.ruiz_iters)
    else:
        Ah, D, E = sp.csc_matrix(prog.A), np.ones(m), np.ones(n)
    if st.eq_scale != 1.0:
        # push harder on exact-equality rows (free to scale per row)
        rw = np.ones(m)
        for cone, sl in blocks:
            if cone.kind == "zero":
                rw[sl] = st.eq_scale
        Ah = sp.diags(rw) @ Ah
        D = D * rw
    bh = D * prog.b
    ch = E * prog.c
    # balance rhs and cost so the embedding's primal/dual halves are on one
    # scale; candidates are unscaled below, so reported residuals are unbiased
    sigma_b = 1.0 / (1.0 + float(np.linalg.norm(bh)))
    sigma_c = 1.0 / (1.0 + float(np.linalg.norm(ch)))
    bh = sigma_b * bh
    ch = sigma_c * ch

    # homogeneous self-dual embedding, u = (x, y, tau), v = (0, s, kappa).
    # Factor only the (b, c)-independent core P = I + [[0, A'], [-A, 0]];
    # the b/c column and row are a rank-2 correction handled by the matrix
    # inversion lemma, so rescaling (b, c) mid-run never refactorizes.
    N = n + m + 1
    S = sp.bmat(
        [
            [None, Ah.T, None],
            [-Ah, None, None],
            [None, None, sp.csc_matrix((1, 1))],
        ],
        format="csc",
    )
    lin = spla.splu((sp.identity(N, format="csc") + S).tocsc())

    qhat = np.concatenate([ch, bh, [0.0]])
    Z1 = lin.solve(qhat)
    g = float(qhat @ Z1)

    def embed_solve(w):
        # (P + qhat e' - e qhat')^{-1} w, e the last unit vector; P e = e
        t = lin.solve(w)
        qt = float(qhat @ t)
        g0 = (t[-1] + qt) / (1.0 + g)
        g1 = (g * t[-1] - qt) / (1.0 + g)
        out = t - g0 * Z1
        out[-1] -= g1
        return out

    u = np.zeros(N)
    v = np.zeros(N)
    u[-1] = 1.0
    v[-1] = 1.0
    if prog.warm_start is not None:
        x0, y0, s0 = prog.warm_start
        u[:n] = sigma_b * (x0 / E)
        u[n:-1] = sigma_c * (y0 / D)
        v[n:-1] = sigma_b * (D * s0)
        v[-1] = 0.0

    bnorm = float(np.linalg.norm(prog.b))
    cnorm = float(np.linalg.norm(prog.c))
    A = prog.A.tocsr()

    def candidates(u, v):
        tau = u[-1]
        x = E * u[:n] / (tau * sigma_b)
        y = D * u[n:-1] / (tau * sigma_c)
        s = (v[n:-1] / D) / (tau * sigma_b)
        return x, y, s

    def residuals(x, y, s):
        pres = float(np.linalg.norm(A @ x + s - prog.b)) / (1.0 + bnorm)
        dres = float(np.linalg.norm(A.T @ y + prog.c)) / (1.0 + cnorm)
        ctx = float(prog.c @ x)
        bty = float(prog.b @ y)
        gap = abs(ctx + bty) / (1.0 + abs(ctx) + abs(bty))
        return pres, dres, gap, ctx

    project_dual = _DualProjector(blocks)
    alpha = st.relax_alpha
    aa = _Anderson(st.aa_memory) if st.aa_memory > 0 else None
    status = "iteration-limit"
    best = None
    it = 0
    last_rescale = 0
    cum_rescale = 1.0
    state_u, state_v = u, v
    for it in range(1, st.max_iters + 1):
        u_tilde = embed_solve(state_u + state_v)
        if alpha != 1.0:
            u_tilde = alpha * u_tilde + (1.0 - alpha) * state_u
        w = u_tilde - state_v
        u = np.empty_like(state_u)
        u[:n] = w[:n]
        u[n:-1] = project_dual(w[n:-1])
        u[-1] = max(w[-1], 0.0)
        # u and v are the map output: cone-consistent, safe for checks and
        # for the returned solution; acceleration only shapes the next input
        v = state_v - u_tilde + u
        if aa is not None:
            mixed = aa.propose(
                np.concatenate([state_u, state_v]), np.concatenate([u, v])
            )
            state_u, state_v = mixed[:N], mixed[N:]
        else:
            state_u, state_v = u, v

        if it % st.check_every == 0 or it == st.max_iters:
            tau = u[-1]
            if tau > 1e-9:
                x, y, s = candidates(u, v)
                pres, dres, gap, ctx = residuals(x, y, s)
                best = (x, y, s, pres, dres, gap, ctx)
                if st.verbose and (it % (st.check_every * 20) == 0):
                    print(
                        f"  it {it:6d}  pres {pres:.3e}  dres {dres:.3e}"
                        f"  gap {gap:.3e}  obj {ctx:+.6e}",
                        file=sys.stderr,
                    )
                if max(pres, dres, gap) <= st.accuracy:
                    status = "optimal"
                    break
                ratio = dres / max(pres, 1e-300)
                if (
                    st.adaptive_scale
                    and it - last_rescale >= 500
                    and (ratio > 3.0 or ratio < 1.0 / 3.0)
                ):
                    # residual imbalance means the dual half of the embedding
                    # is over/under-weighted; boosting c is an exact
                    # reparametrization, so rebalance and warm-restart
                    factor = float(np.clip(np.sqrt(ratio), 0.25, 4.0))
                    factor = float(
                        np.clip(cum_rescale * factor, 1e-2, 1e2) / cum_rescale
                    )
                    if factor != 1.0:
                        if st.verbose:
                            print(
                                f"  it {it:6d}  rescale x{factor:.3f}"
                                f"  (cum {cum_rescale * factor:.3f})",
                                file=sys.stderr,
                            )
                        cum_rescale *= factor
                        sigma_c *= factor
                        ch = ch * factor
                        qhat = np.concatenate([ch, bh, [0.0]])
                        Z1 = lin.solve(qhat)
                        g = float(qhat @ Z1)
                        state_u[n:-1] *= factor
                        state_v[:n] *= factor
                        if aa is not None:
                            aa = _Anderson(st.aa_memory)
                        last_rescale = it
                        continue
            # certificate checks (scaled-space quantities suffice for rays)
            ux, uy = u[:n], u[n:-1]
            vs = v[n:-1]
            ctx_ray = float(ch @ ux)
            bty_ray = float(bh @ uy)
            bh_norm = float(np.linalg.norm(bh))
            ch_norm = float(np.linalg.norm(ch))
            if bty_ray < 0 and bh_norm > 0:
                unsat = float(np.linalg.norm(Ah.T @ uy))
                if unsat * bh_norm <= st.accuracy * (-bty_ray):
                    status = "infeasible"
                    y_cert = sigma_b * D * uy / (-bty_ray)
                    best = (np.full(n, np.nan), y_cert, np.full(m, np.nan), np.inf, np.inf, np.inf, np.nan)
                    break
            if ctx_ray < 0 and ch_norm > 0:
                unsat = float(np.linalg.norm(Ah @ ux + vs))
                if unsat * ch_norm <= st.accuracy * (-ctx_ray):
                    status = "unbounded"
                    x_cert = sigma_c * E * ux / (-ctx_ray)
                    best = (x_cert, np.full(m, np.nan), np.full(m, np.nan), np.inf, np.inf, np.inf, -np.inf)
                    break

    if best is None:
        tau = u[-1] if u[-1] > 1e-12 else 1.0
        x, y, s = candidates(u if u[-1] > 1e-12 else np.r_[u[:-1], 1.0], v)
        pres, dres, gap, ctx = residuals(x, y, s)
        best = (x, y, s, pres, dres, gap, ctx)

    x, y, s, pres, dres, gap, ctx = best
    return ConeSolution(
        x=x,
        y=y,
        s=s,
        status=status,
        primal_res=pres,
        dual_res=dres,
        gap=gap,
        iterations=it,
        wall_time=time.perf_counter() - t0,
        objective=ctx,
    )


class ConeProgramBuilder:
    """Incremental triplet assembly of a ConeProgram.

    Duplicate (row, col) entries are summed on build. Objective defaults to
    zero on every variable.
    """

    def __init__(self):
        self._trip_r: list[int] = []
        self._trip_c: list[int] = []
        self._trip_v: list[float] = []
        self._b: list[float] = []
        self._cones: list[Cone] = []
        self._nvars = 0
        self._obj: dict[int, float] = {}

    @property
    def n_vars(self) -> int:
        return self._nvars

    @property
    def n_rows(self) -> int:
        return len(self._b)

    def add_vars(self, count: int) -> np.ndarray:
        """Allocate variables, returning their column indices."""
        if count < 1:
            raise ValueError("must allocate at least one variable")
        idx = np.arange(self._nvars, self._nvars + count)
        self._nvars += count
        return idx

    def add_cone(self, kind: str, size: int) -> int:
        """Append a cone block of rows (rhs zeroed); returns first row index."""
        cone = Cone(kind, size)
        ofs = len(self._b)
        self._b.extend([0.0] * cone.rows)
        self._cones.append(cone)
        return ofs

    def add_entry(self, row: int, col: int, val: float) -> None:
        if val == 0.0:
            return
        self._trip_r.append(row)
        self._trip_c.append(col)
        self._trip_v.append(float(val))

    def set_rhs(self, row: int, val: float) -> None:
        self._b[row] = float(val)

    def add_objective(self, col: int, val: float) -> None:
        self._obj[col] = self._obj.get(col, 0.0) + float(val)

    def build(self, warm_start=None) -> ConeProgram:
        m, n = len(self._b), self._nvars
        A = sp.coo_matrix(
            (self._trip_v, (self._trip_r, self._trip_c)), shape=(m, n)
        ).tocsc()
        c = np.zeros(n)
        for col, val in self._obj.items():
            c[col] = val
        return ConeProgram(A, np.array(self._b), c, tuple(self._cones), warm_start)


# ---------------------------------------------------------------------------
# sparse-triplet JSON dump for cross-checking against external solvers


def cone_program_to_json(prog: ConeProgram) -> str:
    coo = prog.A.tocoo()
    payload = {
        "format": "cvfields-cone-program-v1",
        "m": prog.m,
        "n": prog.n,
        "A": {
            "rows": coo.row.tolist(),
            "cols": coo.col.tolist(),
            "vals": coo.data.tolist(),
        },
        "b": prog.b.tolist(),
        "c": prog.c.tolist(),
        "cones": [[k.kind, k.size] for k in prog.cones],
    }
    return json.dumps(payload)


def cone_program_from_json(text: str | Path) -> ConeProgram:
    if isinstance(text, Path):
        text = text.read_text(encoding="utf-8")
    d = json.loads(text)
    if d.get("format") != "cvfields-cone-program-v1":
        raise ValueError("unrecognized cone program dump")
    A = sp.coo_matrix(
        (d["A"]["vals"], (d["A"]["rows"], d["A"]["cols"])), shape=(d["m"], d["n"])
    ).tocsc()
    cones = tuple(Cone(kind, size) for kind, size in d["cones"])
    return ConeProgram(A, np.array(d["b"]), np.array(d["c"]), cones)
