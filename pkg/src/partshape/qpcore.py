"""Projection onto polyhedral cones under a quadratic metric.

Solves

    minimize (x - x0)' G (x - x0)   subject to   A x >= 0

with a dual active-set method in the style of Goldfarb and Idnani. The
solver starts from the unconstrained anchor ``x0``, adds the most violated
row, and drops rows whose multipliers would turn negative. Everything is
carried out in multiplier space: with K = A G^{-1} A' the slacks are
s = A x0 + K u and the primal point is x = x0 + G^{-1} A' u, so a
:class:`ConeProjector` built once for (G, A) serves any number of anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse

KKT_TOL = 1e-8
FEAS_TOL = 1e-9


class QpError(RuntimeError):
    pass


class QpInputError(QpError, ValueError):
    pass


class QpNonConvergence(QpError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass
class QuadraticProgram:
    gram: np.ndarray
    anchor: np.ndarray
    rows: sparse.csr_matrix

    def __post_init__(self):
        self.gram = np.atleast_2d(np.asarray(self.gram, dtype=float))
        self.anchor = np.asarray(self.anchor, dtype=float).ravel()
        self.rows = sparse.csr_matrix(self.rows, dtype=float)
        d = self.anchor.size
        if self.gram.shape != (d, d):
            raise QpInputError(f"gram is {self.gram.shape}, anchor has length {d}")
        if self.rows.shape[0] and self.rows.shape[1] != d:
            raise QpInputError(f"constraint rows have {self.rows.shape[1]} columns, expected {d}")
        if not np.allclose(self.gram, self.gram.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.gram).max())):
            raise QpInputError("gram matrix is not symmetric")

    @property
    def dim(self) -> int:
        return self.anchor.size

    def objective(self, x) -> float:
        r = np.asarray(x) - self.anchor
        return float(r @ self.gram @ r)


@dataclass
class QpSolution:
    x: np.ndarray
    active_set: np.ndarray
    multipliers: np.ndarray
    kkt_residual: float
    iterations: int
    ridge: float = 0.0


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = KKT_TOL
    feas_tol: float = FEAS_TOL
    max_iter: int | None = None  # default 50 * m
    ridge_start: float = 1e-10
    ridge_max: float = 1e-6


def _factor_gram(G: np.ndarray, opts: SolverOptions):
    """Cholesky of G, adding a scaled ridge when G is not positive definite."""
    d = G.shape[0]
    scale = max(np.trace(G) / d, np.finfo(float).tiny)
    ridge = 0.0
    eps = opts.ridge_start
    while True:
        Gr = G + ridge * scale * np.eye(d) if ridge else G
        try:
            cf = linalg.cho_factor(Gr, lower=True, check_finite=False)
            if np.all(np.diag(cf[0]) > 0) and np.isfinite(cf[0]).all():
                return cf, Gr, ridge * scale
        except linalg.LinAlgError:
            pass
        if eps > opts.ridge_max * (1 + 1e-9):
            raise QpInputError("gram matrix is not positive semidefinite beyond ridge repair")
        ridge = eps
        eps *= 10.0


class ConeProjector:
    """Reusable solver for a fixed metric ``gram`` and fixed ``rows``."""

    def __init__(self, gram, rows, opts: SolverOptions | None = None):
        self.opts = opts or SolverOptions()
        G = np.atleast_2d(np.asarray(gram, dtype=float))
        if not np.allclose(G, G.T, rtol=0, atol=1e-12 * max(1.0, np.abs(G).max())):
            raise QpInputError("gram matrix is not symmetric")
        G = 0.5 * (G + G.T)
        self.rows = sparse.csr_matrix(rows, dtype=float)
        self.cf, self.gram, self.ridge = _factor_gram(G, self.opts)
        A = self.rows.toarray()
        self.A = A
        m = A.shape[0]
        if m:
            self.GinvAt = linalg.cho_solve(self.cf, A.T, check_finite=False)
            K = A @ self.GinvAt
            self.K = 0.5 * (K + K.T)
        else:
            self.GinvAt = np.zeros((G.shape[0], 0))
            self.K = np.zeros((0, 0))
        self.max_iter = self.opts.max_iter or max(50 * m, 50)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def project(self, anchor) -> QpSolution:
        x0 = np.asarray(anchor, dtype=float).ravel()
        m = self.m
        if m == 0:
            return QpSolution(x0.copy(), np.zeros(0, int), np.zeros(0), 0.0, 0, self.ridge)
        s0 = self.A @ x0
        tol = max(self.opts.feas_tol, 1e-13 * np.abs(s0).max())
        if s0.min() >= -tol:
            sol = QpSolution(x0.copy(), np.zeros(0, int), np.zeros(m), 0.0, 0, self.ridge)
            sol.kkt_residual = self._kkt(sol.x, x0, sol.multipliers)
            return sol
        u, active, it = self._dual_active_set(s0, tol)
        x = x0 + self.GinvAt @ u
        lam = 2.0 * u
        if active:
            x, lam = self._refine(x0, sorted(active), x, lam)
        sol = QpSolution(x, np.array(sorted(active), dtype=int), lam, 0.0, it, self.ridge)
        sol.kkt_residual = self._kkt(x, x0, lam)
        return sol

    def _dual_active_set(self, s0, tol):
        K = self.K
        m = K.shape[0]
        u = np.zeros(m)
        s = s0.copy()
        active: list[int] = []
        settled = np.zeros(m, dtype=bool)  # dependent rows violated only by rounding
        it = 0
        while True:
            # working-set slacks are zero by construction; negative values there are rounding
            short = np.where(settled, np.inf, s)
            short[active] = np.inf
            if short.min() >= -tol:
                break
            # most violated row; argmin returns the lowest index on ties
            p = int(np.argmin(short))
            while True:
                it += 1
                if it > self.max_iter:
                    raise QpNonConvergence(
                        f"dual active-set exceeded {self.max_iter} iterations",
                        best=self._primal(u))
                if active:
                    KWW = K[np.ix_(active, active)]
                    r = linalg.solve(KWW, K[active, p], assume_a="pos", check_finite=False)
                    ds = K[:, p] - K[:, active] @ r
                else:
                    r = np.zeros(0)
                    ds = K[:, p].copy()
                curv = ds[p]
                t2 = -s[p] / curv if curv > 1e-14 * max(K[p, p], 1e-300) else np.inf
                # partial step limited by active multipliers hitting zero
                t1, drop = np.inf, -1
                for idx, rj in enumerate(r):
                    if rj > 0:
                        tj = u[active[idx]] / rj
                        if tj < t1:
                            t1, drop = tj, idx
                if not np.isfinite(min(t1, t2)):
                    # a homogeneous cone always contains 0, so a dependent row with
                    # nothing to drop is only violated by rounding (pointed cones
                    # with large multipliers); anything larger is a genuine error
                    if s[p] >= -1e-8 * max(1.0, np.abs(s0).max()):
                        settled[p] = True
                        break
                    raise QpInputError("constraint set is infeasible")
                if t2 <= t1:
                    t = t2
                    if active:
                        u[active] -= t * r
                    u[p] += t
                    s += t * ds
                    s[p] = 0.0
                    active.append(p)
                    break
                t = t1
                if active:
                    u[active] -= t * r
                u[p] += t
                s += t * ds
                j = active.pop(drop)
                u[j] = 0.0
                if s[p] >= -tol:
                    if u[p] > 0:
                        active.append(p)
                    break
            # polish: exact multipliers for the working set
            if active:
                KWW = K[np.ix_(active, active)]
                uw = linalg.solve(KWW, -s0[active], assume_a="pos", check_finite=False)
                if np.all(uw >= 0):
                    u[:] = 0.0
                    u[active] = uw
                    s = s0 + K[:, active] @ uw
                    s[active] = 0.0
            np.maximum(u, 0.0, out=u)
        return u, active, it

    def _refine(self, x0, active, x, lam):
        """Recompute x and the multipliers for a fixed working set in whitened space.

        Projecting L'x0 onto the null space of A_W L^{-T} with an orthogonal
        factorization avoids the squared conditioning of K, which otherwise
        leaves active slacks (and hence complementarity) visibly nonzero when
        G is badly scaled.
        """
        L = self._chol_lower
        AW = self.A[active]
        Ct = linalg.solve_triangular(L, AW.T, lower=True, check_finite=False)
        Q, R = linalg.qr(Ct, mode="economic")
        if np.abs(np.diag(R)).min() <= 1e-12 * np.abs(np.diag(R)).max():
            return x, lam
        z0 = L.T @ x0
        dz = -Q @ (Q.T @ z0)
        xr = linalg.solve_triangular(L.T, z0 + dz, lower=False, check_finite=False)
        # iterative refinement of the active slacks: with large multipliers, rounding-level
        # slacks would otherwise dominate the complementarity residual
        for _ in range(2):
            sw = AW @ xr
            dzc = -Q @ linalg.solve_triangular(R, sw, trans="T", lower=False, check_finite=False)
            xr = xr + linalg.solve_triangular(L.T, dzc, lower=False, check_finite=False)
            dz = dz + dzc
        lw = linalg.solve_triangular(R, Q.T @ (2.0 * dz), lower=False, check_finite=False)
        if lw.min() < -1e-10 * max(1.0, np.abs(lw).max()):
            return x, lam
        lr = np.zeros_like(lam)
        lr[active] = np.maximum(lw, 0.0)
        return xr, lr

    @property
    def _chol_lower(self):
        if not hasattr(self, "_L"):
            self._L = np.tril(self.cf[0]) if self.cf[1] else np.triu(self.cf[0]).T
        return self._L

    def _primal(self, u):
        return self.GinvAt @ u

    def _kkt(self, x, x0, lam) -> float:
        return kkt_residual_parts(self.gram, x0, self.A, x, lam)


def solve(qp: QuadraticProgram, opts: SolverOptions | None = None) -> QpSolution:
    """Minimize (x - anchor)' G (x - anchor) subject to rows @ x >= 0."""
    proj = ConeProjector(qp.gram, qp.rows, opts)
    sol = proj.project(qp.anchor)
    tol = (opts or SolverOptions()).kkt_tol
    if sol.kkt_residual > tol * max(1.0, np.abs(qp.anchor).max()):
        raise QpNonConvergence(f"KKT residual {sol.kkt_residual:.3g} above tolerance", best=sol.x)
    return sol


def kkt_residual_parts(G, x0, A, x, lam) -> float:
    G = np.asarray(G)
    A = A.toarray() if sparse.issparse(A) else np.atleast_2d(np.asarray(A, dtype=float))
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    stat = 2.0 * G @ (x - x0)
    if A.size:
        stat = stat - A.T @ lam
        slack = A @ x
        primal = max(0.0, -slack.min())
        dual = max(0.0, -lam.min())
        comp = np.abs(lam * slack).max()
    else:
        primal = dual = comp = 0.0
    return float(max(np.abs(stat).max(initial=0.0), primal, dual, comp))


def kkt_residual(qp: QuadraticProgram, candidate, multipliers) -> float:
    """Largest violation among stationarity, primal/dual feasibility and complementarity."""
    return kkt_residual_parts(qp.gram, qp.anchor, qp.rows, candidate, multipliers)


def pava(values, weights=None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit (pool adjacent violators)."""
    y = np.asarray(values, dtype=float).ravel()
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != y.shape:
        raise ValueError("values and weights differ in length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    means, wsum, size = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        wsum.append(wi)
        size.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            w2 = wsum[-2] + wsum[-1]
            means[-2] = (wsum[-2] * means[-2] + wsum[-1] * means[-1]) / w2
            wsum[-2] = w2
            size[-2] += size[-1]
            del means[-1], wsum[-1], size[-1]
    return np.repeat(means, size)


def difference_rows(d: int) -> sparse.csr_matrix:
    """Rows x[k+1] - x[k] >= 0, k = 0..d-2."""
    return sparse.diags([-np.ones(d - 1), np.ones(d - 1)], [0, 1], shape=(d - 1, d), format="csr")
