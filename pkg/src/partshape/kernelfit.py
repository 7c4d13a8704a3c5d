"""Shape-constrained kernel-weighted least squares.

Local-linear estimates of (beta(t), beta'(t)) on a grid, then a single
projection of the stacked grid vector onto the constraint cone in the
metric blkdiag(Psi(t_0), ..., Psi(t_M)).

The stacked vector is ordered grid point by grid point, and within a grid
point as vec(B(t)) = (beta_1..beta_p, beta_1'..beta_p'); coordinate
(m, slot, j) therefore sits at ``m * 2p + slot * p + j``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .longdata import DataError, Hypothesis, LongitudinalSample
from .qpcore import ConeProjector, QpSolution, SolverOptions

DEFAULT_GRID_SIZE = 30
DEFAULT_BANDWIDTHS = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4)
MIN_INTERVAL_STEPS = 3


class FitError(RuntimeError):
    pass


class FeasibilityError(ValueError):
    pass


class Kernel(str, enum.Enum):
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN = "gaussian"  # standard normal in 3u, truncated to [-1, 1]
    UNIFORM = "uniform"

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        inside = np.abs(u) <= 1.0
        if self is Kernel.EPANECHNIKOV:
            k = 0.75 * (1.0 - u * u)
        elif self is Kernel.UNIFORM:
            k = np.full_like(u, 0.5)
        else:
            # normalizing constant of N(0, 1/9) restricted to [-1, 1]
            k = 3.0 * np.exp(-4.5 * u * u) / (np.sqrt(2 * np.pi) * 0.9973002039367398)
        return np.where(inside, k, 0.0)


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float
    kernel: Kernel = Kernel.EPANECHNIKOV

    def __post_init__(self):
        if not 0 < self.bandwidth <= 1:
            raise ValueError(f"bandwidth must lie in (0, 1], got {self.bandwidth}")
        object.__setattr__(self, "kernel", Kernel(self.kernel))

    def weights(self, d):
        """K_h(d) = K(d / h) / h."""
        h = self.bandwidth
        return self.kernel(np.asarray(d) / h) / h


def make_grid(hypothesis: Hypothesis | None = None, size: int = DEFAULT_GRID_SIZE,
              min_steps: int = MIN_INTERVAL_STEPS, extra=()) -> np.ndarray:
    """Equispaced grid on [0, 1] holding every constraint endpoint exactly.

    Grid points closer than 1e-9 to an endpoint are replaced by it. Intervals
    covering fewer than ``min_steps`` grid steps get extra equispaced points.
    """
    grid = list(np.linspace(0.0, 1.0, size + 1))
    ends = sorted(set(hypothesis.endpoints() if hypothesis else []) | set(extra))
    grid = _merge_exact(grid, ends)
    if hypothesis is not None:
        for c in hypothesis.constraints:
            a, b = c.interval
            inside = [g for g in grid if a <= g <= b]
            if len(inside) - 1 < min_steps:
                fill = np.linspace(a, b, min_steps + 1)[1:-1]
                grid = _merge_exact(grid, ends + list(fill), replace=False)
    return np.array(sorted(set(grid)))


def _merge_exact(grid, points, replace=True, tol=1e-9):
    out = list(grid)
    for e in points:
        near = [k for k, g in enumerate(out) if abs(g - e) <= tol]
        if near and replace:
            for k in near:
                out[k] = e
        elif not near:
            out.append(e)
    return sorted(set(out))


@dataclass
class LocalFit:
    grid: np.ndarray
    coef: np.ndarray   # (M+1, 2p): vec(B(t_m)) per row
    grams: np.ndarray  # (M+1, 2p, 2p)
    qp: QpSolution | None = None
    repaired: tuple = ()  # grid indices whose slope block needed a ridge

    @property
    def p(self) -> int:
        return self.coef.shape[1] // 2

    @property
    def beta(self) -> np.ndarray:
        return self.coef[:, : self.p]

    @property
    def dbeta(self) -> np.ndarray:
        return self.coef[:, self.p:]

    @property
    def values(self) -> np.ndarray:
        """B(t_m) as (M+1, p, 2) matrices [beta, beta']."""
        return np.stack([self.beta, self.dbeta], axis=-1)

    def stacked(self) -> np.ndarray:
        return self.coef.ravel()

    def beta_at(self, t) -> np.ndarray:
        """Linear interpolation of the grid values; returns (len(t), p)."""
        t = np.atleast_1d(t)
        return np.column_stack([np.interp(t, self.grid, self.beta[:, j]) for j in range(self.p)])


def _moments(sample: LongitudinalSample, spec: KernelSpec, grid: np.ndarray):
    T = sample.times
    X = sample.obs_design
    D = T[None, :] - grid[:, None]
    w = spec.weights(D) * sample.obs_weights[None, :]
    # W_{il}(t) = Z_{il}(t) kron X_i = (X_i, (T_il - t) X_i)
    wX = w[:, :, None] * X[None, :, :]
    S0 = np.einsum("mna,nb->mab", wX, X)
    S1 = np.einsum("mna,nb->mab", wX * D[:, :, None], X)
    S2 = np.einsum("mna,nb->mab", wX * (D * D)[:, :, None], X)
    grams = np.block([[S0, S1], [S1, S2]])
    return grams, w, D


def _repair_grams(grams, w, grid, p, h, rtol=1e-10, ridges=(1e-8, 1e-6, 1e-4)):
    """Make every local Gram invertible, or fail naming the grid point.

    When the window holds a single distinct time (common with scheduled
    visits) only the slope block is singular; a small ridge on that block
    keeps the value estimates and shrinks the unidentified slope towards 0.
    A singular value block cannot be repaired.
    """
    grams = grams.copy()
    repaired = []
    for m, G in enumerate(grams):
        n_pos = int(np.count_nonzero(w[m] > 0))
        ev0 = np.linalg.eigvalsh(G[:p, :p])
        if n_pos < 2 or ev0[-1] <= 0 or ev0[0] <= rtol * ev0[-1]:
            raise FitError(
                f"local design is singular at grid point t={grid[m]:.4g} "
                f"({n_pos} observations in window); try a larger bandwidth")
        ev = np.linalg.eigvalsh(G)
        if ev[0] > rtol * ev[-1]:
            continue
        scale = h * h * np.trace(G[:p, :p]) / p
        for r in ridges:
            Gr = G.copy()
            Gr[p:, p:] += r * scale * np.eye(p)
            ev = np.linalg.eigvalsh(Gr)
            if ev[0] > rtol * ev[-1]:
                grams[m] = Gr
                repaired.append(m)
                break
        else:
            raise FitError(f"local design at grid point t={grid[m]:.4g} could not be repaired; "
                           "try a larger bandwidth")
    return grams, repaired


def smoother_matrix(sample: LongitudinalSample, spec: KernelSpec, grid: np.ndarray):
    """Linear map from the response vector to the stacked unconstrained fit.

    Returns ``(S, grams)`` with S of shape (2p(M+1), N).
    """
    grid = np.asarray(grid, dtype=float)
    grams, w, D = _moments(sample, spec, grid)
    p = sample.p
    grams, repaired = _repair_grams(grams, w, grid, p, spec.bandwidth)
    X = sample.obs_design
    rhs = np.concatenate([w[:, None, :] * X.T[None], (w * D)[:, None, :] * X.T[None]], axis=1)
    S = np.empty((grid.size, 2 * p, sample.total_obs))
    for m in range(grid.size):
        S[m] = linalg.solve(grams[m], rhs[m], assume_a="pos", check_finite=False)
    return S.reshape(grid.size * 2 * p, -1), grams, repaired


def unconstrained_fit(sample: LongitudinalSample, spec: KernelSpec, grid=None) -> LocalFit:
    """Local-linear estimate of vec(B(t)) at every grid point."""
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    grams, w, D = _moments(sample, spec, grid)
    grams, repaired = _repair_grams(grams, w, grid, sample.p, spec.bandwidth)
    X = sample.obs_design
    wy = w * sample.responses[None, :]
    rhs = np.concatenate([wy @ X, (wy * D) @ X], axis=1)
    coef = np.stack([linalg.solve(g, r, assume_a="pos", check_finite=False) for g, r in zip(grams, rhs)])
    return LocalFit(grid, coef, grams, repaired=tuple(repaired))


@dataclass
class ConstraintAssembly:
    rows: sparse.csr_matrix
    ranges: list = field(default_factory=list)  # (start, stop) per constraint

    @property
    def m(self) -> int:
        return self.rows.shape[0]


def _grid_indices(grid, interval):
    a, b = interval
    idx = np.flatnonzero((grid >= a) & (grid <= b))
    if idx.size < 2 or grid[idx[0]] != a or grid[idx[-1]] != b:
        raise FeasibilityError(f"grid does not contain the endpoints of {interval}")
    return idx


def assemble_constraints(hypothesis: Hypothesis, grid, p: int) -> ConstraintAssembly:
    """Inequality rows over the stacked grid vector, one block per constraint."""
    grid = np.asarray(grid, dtype=float)
    d = 2 * p * grid.size
    r_idx, c_idx, vals = [], [], []
    ranges = []
    row = 0

    def coord(m, slot, j):
        return m * 2 * p + slot * p + j

    for c in hypothesis.constraints:
        j = c.covariate
        if not 0 <= j < p:
            raise FeasibilityError(f"constraint refers to covariate {j}, model has {p}")
        sg = c.shape.sign
        idx = _grid_indices(grid, c.interval)
        start = row
        if c.shape.kind == "monotone":
            for m0, m1 in zip(idx[:-1], idx[1:]):
                r_idx += [row, row]
                c_idx += [coord(m0, 0, j), coord(m1, 0, j)]
                vals += [-sg, sg]
                row += 1
        elif c.shape.kind == "convex":
            for m0, m1 in zip(idx[:-1], idx[1:]):
                gap = grid[m1] - grid[m0]
                r_idx += [row] * 3
                c_idx += [coord(m0, 0, j), coord(m1, 0, j), coord(m0, 1, j)]
                vals += [-sg / gap, sg / gap, -sg]
                row += 1
        else:
            for m0 in idx:
                r_idx.append(row)
                c_idx.append(coord(m0, 0, j))
                vals.append(sg)
                row += 1
        ranges.append((start, row))
    if row > d:
        raise FeasibilityError(
            f"{row} inequality rows exceed the rank budget 2p(M+1) = {d}")
    rows = sparse.csr_matrix((vals, (r_idx, c_idx)), shape=(row, d))
    return ConstraintAssembly(rows, ranges)


def block_gram(grams) -> np.ndarray:
    return linalg.block_diag(*grams)


def constrained_fit(sample: LongitudinalSample, spec: KernelSpec, hypothesis: Hypothesis,
                    grid=None, unconstrained: LocalFit | None = None,
                    opts: SolverOptions | None = None) -> LocalFit:
    """Project the unconstrained grid estimate onto the hypothesis cone."""
    grid = make_grid(hypothesis) if grid is None else np.asarray(grid, dtype=float)
    fit = unconstrained or unconstrained_fit(sample, spec, grid)
    cons = assemble_constraints(hypothesis, grid, sample.p)
    proj = ConeProjector(block_gram(fit.grams), cons.rows, opts)
    sol = proj.project(fit.stacked())
    return LocalFit(grid, sol.x.reshape(fit.coef.shape), fit.grams, qp=sol, repaired=fit.repaired)


def interpolation_matrix(grid, times, design, p: int) -> sparse.csr_matrix:
    """Sparse map from the stacked grid vector to X_i' beta(T_il).

    beta(T) is the linear interpolant of the grid values.
    """
    grid = np.asarray(grid)
    t = np.asarray(times)
    k = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, grid.size - 2)
    lam = (t - grid[k]) / (grid[k + 1] - grid[k])
    N = t.size
    rows = np.repeat(np.arange(N), 2 * p)
    jj = np.tile(np.arange(p), 2)
    mm = np.concatenate([np.repeat(k[:, None], p, 1), np.repeat(k[:, None] + 1, p, 1)], axis=1)
    cols = (mm * 2 * p + jj[None, :]).ravel()
    vals = np.concatenate([(1 - lam)[:, None] * design, lam[:, None] * design], axis=1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(N, 2 * p * grid.size))


class KernelPlan:
    """Everything about a kernel fit that does not depend on the responses.

    Bootstrap replicates only change the responses, so the smoother, the
    block Gram factorization and the constraint rows are computed once.
    """

    engine = "kernel"

    def __init__(self, sample: LongitudinalSample, spec: KernelSpec,
                 hypothesis: Hypothesis | None, grid=None, opts: SolverOptions | None = None):
        self.spec = spec
        self.p = sample.p
        self.grid = make_grid(hypothesis) if grid is None else np.asarray(grid, dtype=float)
        self.smoother, self.grams, self.repaired = smoother_matrix(sample, spec, self.grid)
        self.fit_map = interpolation_matrix(self.grid, sample.times, sample.obs_design, self.p)
        self.constraints = (assemble_constraints(hypothesis, self.grid, self.p)
                            if hypothesis is not None else None)
        rows = self.constraints.rows if self.constraints else sparse.csr_matrix((0, self.smoother.shape[0]))
        self.projector = ConeProjector(block_gram(self.grams), rows, opts)

    @property
    def quad_grid(self) -> np.ndarray:
        return self.grid

    def unconstrained(self, y) -> np.ndarray:
        return self.smoother @ y

    def constrained(self, theta) -> QpSolution:
        return self.projector.project(theta)

    def beta_grid(self, theta) -> np.ndarray:
        """(M+1, p) coefficient values on the grid."""
        return np.asarray(theta).reshape(self.grid.size, 2, self.p)[:, 0, :]

    def fitted(self, theta) -> np.ndarray:
        return self.fit_map @ theta

    def beta_at(self, theta, t) -> np.ndarray:
        """Linear interpolation of the grid values; shape (len(t), p)."""
        vals = self.beta_grid(theta)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([np.interp(t, self.grid, vals[:, j]) for j in range(self.p)])

    def metadata(self) -> dict:
        return {"engine": "kernel", "bandwidth": self.spec.bandwidth,
                "kernel": self.spec.kernel.value, "grid_size": int(self.grid.size),
                "ridge_repaired_points": [float(self.grid[m]) for m in self.repaired]}


def _cv_folds(n: int, folds: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    assign = np.arange(n) % folds
    rng.shuffle(assign)
    return assign


def prediction_error(sample: LongitudinalSample, beta_at) -> float:
    """Per-subject averaged squared error of X_i' beta(T_il), averaged over subjects."""
    pred = np.einsum("np,np->n", sample.obs_design, beta_at(sample.times))
    sq = (sample.responses - pred) ** 2
    return float(np.sum(sq * sample.obs_weights))


def select_bandwidth(sample: LongitudinalSample, candidates=DEFAULT_BANDWIDTHS, folds: int = 5,
                     seed=0, kernel: Kernel = Kernel.EPANECHNIKOV, grid=None):
    """Subject-level K-fold cross-validation over candidate bandwidths.

    Returns ``(bandwidth, errors)`` where ``errors`` maps each candidate to
    its mean held-out prediction error (inf when a fold could not be fit).
    Ties go to the smaller bandwidth.
    """
    if sample.n < folds:
        raise DataError(f"cross-validation needs at least {folds} subjects, got {sample.n}")
    cands = sorted(float(h) for h in candidates)
    if not cands:
        raise ValueError("no candidate bandwidths")
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    assign = _cv_folds(sample.n, folds, seed)
    errors = {}
    for h in cands:
        spec = KernelSpec(h, kernel)
        total = 0.0
        for f in range(folds):
            train = sample.subset(np.flatnonzero(assign != f))
            test = sample.subset(np.flatnonzero(assign == f))
            try:
                fit = unconstrained_fit(train, spec, grid)
            except (FitError, linalg.LinAlgError):
                total = np.inf
                break
            total += prediction_error(test, fit.beta_at) * test.n
        errors[h] = total / sample.n
    finite = {h: e for h, e in errors.items() if np.isfinite(e)}
    if not finite:
        raise FitError("no candidate bandwidth could be fit on every fold")
    best = min(finite.values())
    # errors this close are numerically indistinguishable
    slack = 1e-10 * max(best, float(np.sum(sample.obs_weights * sample.responses ** 2)))
    chosen = min(h for h, e in finite.items() if e <= best + slack)
    return chosen, errors
