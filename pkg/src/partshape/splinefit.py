"""Shape-constrained regression splines with I-spline and C-spline bases.

Quadratic I-splines are running integrals of the order-2 M-splines (hat
functions) on the knot vector (0, 0, k_1, ..., k_K, 1, 1); cubic C-splines
integrate the I-splines once more. Either family has K + 2 members, so with
the free intercept (plus the free linear term for C-splines) a covariate
spans the full quadratic (cubic) spline space.

Since the hats are the derivatives of the I-splines (second derivatives of
the C-splines), nonnegative coefficients on the hats that touch an interval
make the fit nondecreasing (convex) there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy import linalg, sparse

from .kernelfit import FitError, _cv_folds, make_grid, prediction_error
from .longdata import DataError, Hypothesis, LongitudinalSample
from .qpcore import ConeProjector, QpSolution, SolverOptions

DEFAULT_KNOT_COUNTS = (0, 1, 2, 3, 4)
DENSE_POINTS = 51
POSITIVITY_RULES = ("knots", "bernstein", "dense")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# bases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KnotSequence:
    interior: tuple[float, ...] = ()
    order: int = 3

    def __post_init__(self):
        ks = tuple(sorted(float(k) for k in self.interior))
        if any(not 0 < k < 1 for k in ks):
            raise ConfigError(f"interior knots must lie in (0, 1): {ks}")
        if len(set(ks)) != len(ks):
            raise ConfigError(f"interior knots must be distinct: {ks}")
        object.__setattr__(self, "interior", ks)

    @property
    def breakpoints(self) -> np.ndarray:
        return np.array([0.0, *self.interior, 1.0])

    def extended(self, order: int) -> np.ndarray:
        return np.array([0.0] * order + list(self.interior) + [1.0] * order)

    def with_knots(self, extra) -> "KnotSequence":
        new = {k for k in self.interior}
        new |= {float(e) for e in extra if 1e-12 < e < 1 - 1e-12}
        return KnotSequence(tuple(sorted(new)), self.order)


def _as_knots(knots) -> KnotSequence:
    return knots if isinstance(knots, KnotSequence) else KnotSequence(tuple(knots))


def _check_t(t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.size and (t.min() < -1e-12 or t.max() > 1 + 1e-12):
        raise ValueError("evaluation points must lie in [0, 1]")
    return np.clip(t, 0.0, 1.0)


def mspline_basis(t, knots, order: int) -> np.ndarray:
    """M-splines of the given order by Ramsay's recursion; shape (len(t), K + order).

    Each M-spline is a density: nonnegative with unit integral.
    """
    t = _check_t(t)
    tau = _as_knots(knots).extended(order)
    nb1 = tau.size - 1
    M = np.zeros((t.size, nb1))
    # order 1: normalized indicators; t = 1 goes to the last nonempty span
    last = max(i for i in range(nb1) if tau[i + 1] > tau[i])
    for i in range(nb1):
        if tau[i + 1] > tau[i]:
            hit = (t >= tau[i]) & ((t < tau[i + 1]) | ((i == last) & (t == tau[i + 1])))
            M[hit, i] = 1.0 / (tau[i + 1] - tau[i])
    for k in range(2, order + 1):
        nb = tau.size - k
        new = np.zeros((t.size, nb))
        for i in range(nb):
            span = tau[i + k] - tau[i]
            if span <= 0:
                continue
            new[:, i] = k * ((t - tau[i]) * M[:, i] + (tau[i + k] - t) * M[:, i + 1]) / ((k - 1) * span)
        M = new
    return M


def _hats(knots: KnotSequence):
    tau = knots.extended(2)
    return tau[:-2], tau[1:-1], tau[2:]


def _hat_pieces(t, a, b, c):
    """Value, first and second integrals of the order-2 M-spline on (a, b, c)."""
    t = t[:, None]
    H = 2.0 / (c - a)
    left = b > a
    right = c > b
    wl = np.where(left, b - a, 1.0)
    wr = np.where(right, c - b, 1.0)
    Ib = (b - a) / (c - a)
    Cb = H * (b - a) ** 2 / 6.0
    Cc = Cb + Ib * (c - b) + H * (c - b) ** 2 / 3.0
    in_l = (t > a) & (t < b)
    in_r = (t >= b) & (t < c)
    after = t >= c
    dl, dr = t - a, c - t
    M = np.where(in_l, H * dl / wl, 0.0) + np.where(in_r & right, H * dr / wr, 0.0)
    # the right end of the last hat (b = c = 1) carries its peak value
    M = np.where(after & ~right & (t <= c), H, M)
    I = (np.where(in_l, H * dl ** 2 / (2 * wl), 0.0)
         + np.where(in_r, Ib + H * ((c - b) ** 2 - dr ** 2) / (2 * wr), 0.0)
         + np.where(after, 1.0, 0.0))
    C = (np.where(in_l, H * dl ** 3 / (6 * wl), 0.0)
         + np.where(in_r, Cb + Ib * (t - b) + H / (2 * wr) * ((c - b) ** 2 * (t - b) - ((c - b) ** 3 - dr ** 3) / 3.0), 0.0)
         + np.where(after, Cc + (t - c), 0.0))
    dM = np.where(in_l, H / wl, 0.0) - np.where(in_r & right, H / wr, 0.0)
    return M, I, C, dM


def ispline_basis(t, knots):
    """Quadratic I-splines and their first derivatives, each (len(t), K + 2)."""
    k = _as_knots(knots)
    M, I, _, _ = _hat_pieces(_check_t(t), *_hats(k))
    return I, M


def cspline_basis(t, knots):
    """Cubic C-splines with first and second derivatives, each (len(t), K + 2)."""
    k = _as_knots(knots)
    M, I, C, _ = _hat_pieces(_check_t(t), *_hats(k))
    return C, I, M


def hat_peaks(knots) -> np.ndarray:
    """Location of the peak of each hat, i.e. tau[k + 1]."""
    return _hats(_as_knots(knots))[1]


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovariateBasis:
    """Basis for one coefficient function.

    Family "I": beta(t) = c0 + sum_k c_k I_k(t).
    Family "C": beta(t) = c01 + c02 t + sum_k c_k C_k(t).
    """

    family: str
    knots: KnotSequence

    def __post_init__(self):
        if self.family not in ("I", "C"):
            raise ConfigError(f"unknown basis family {self.family!r}")

    @property
    def n_free(self) -> int:
        return 1 if self.family == "I" else 2

    @property
    def n_coef(self) -> int:
        return self.n_free + len(self.knots.interior) + 2

    def columns(self, t, deriv: int = 0) -> np.ndarray:
        t = _check_t(t)
        ones, zeros = np.ones((t.size, 1)), np.zeros((t.size, 1))
        if self.family == "I":
            val, d1 = ispline_basis(t, self.knots)
            _, _, _, d2 = _hat_pieces(t, *_hats(self.knots))
            parts = {0: (ones, val), 1: (zeros, d1), 2: (zeros, d2)}
            lead, body = parts[deriv]
            return np.hstack([lead, body])
        val, d1, d2 = cspline_basis(t, self.knots)
        parts = {0: (ones, t[:, None], val), 1: (zeros, ones, d1), 2: (zeros, zeros, d2)}
        return np.hstack(parts[deriv])

    def coef_index(self, k: int) -> int:
        """Column of the k-th shape-carrying basis function."""
        return self.n_free + k


@dataclass
class SplineModel:
    bases: tuple[CovariateBasis, ...]
    coef: np.ndarray | None = None
    qp: QpSolution | None = None

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([b.n_coef for b in self.bases])])

    @property
    def n_coef(self) -> int:
        return int(self.offsets[-1])

    def block(self, j: int) -> slice:
        o = self.offsets
        return slice(int(o[j]), int(o[j + 1]))

    def evaluate(self, t, deriv: int = 0, coef=None) -> np.ndarray:
        """beta_j(t) for all j; shape (len(t), p)."""
        c = self.coef if coef is None else coef
        return np.column_stack([b.columns(t, deriv) @ c[self.block(j)]
                                for j, b in enumerate(self.bases)])

    def with_coef(self, coef, qp=None) -> "SplineModel":
        return SplineModel(self.bases, np.asarray(coef, dtype=float), qp)

    def metadata(self) -> dict:
        return {"families": [b.family for b in self.bases],
                "knots": [list(b.knots.interior) for b in self.bases]}


def build_models(p: int, hypothesis: Hypothesis | None = None, knots=(),
                 per_covariate: dict | None = None) -> SplineModel:
    """One basis per covariate: C-splines where curvature is constrained, else I-splines.

    ``knots`` are shared interior knots; constraint endpoints of a covariate
    are added to that covariate's knots only.
    """
    bases = []
    for j in range(p):
        base = KnotSequence(tuple((per_covariate or {}).get(j, knots)))
        cons = hypothesis.for_covariate(j) if hypothesis else []
        ks = base.with_knots([v for c in cons for v in c.interval])
        family = "C" if any(c.shape.kind == "convex" for c in cons) else "I"
        bases.append(CovariateBasis(family, ks))
    return SplineModel(tuple(bases))


def design_matrix(sample: LongitudinalSample, model: SplineModel) -> np.ndarray:
    """Columns X_ij * phi_k^j(T_il) for every covariate block."""
    X = sample.obs_design
    return np.hstack([X[:, [j]] * b.columns(sample.times) for j, b in enumerate(model.bases)])


def _weighted_qr(D, w):
    sw = np.sqrt(w)
    return linalg.qr(D * sw[:, None], mode="economic", pivoting=True)


def _rank_check(R, piv, model: SplineModel, rtol=1e-10):
    diag = np.abs(np.diag(R))
    bad = np.flatnonzero(diag <= rtol * max(diag.max(initial=0.0), np.finfo(float).tiny))
    if bad.size:
        off = model.offsets
        covs = sorted({int(np.searchsorted(off, piv[k], side="right") - 1) for k in bad})
        raise FitError(f"spline design is rank deficient in covariate(s) {covs}; "
                       "use fewer knots or check the covariates")


def unconstrained_fit(sample: LongitudinalSample, model: SplineModel) -> SplineModel:
    """Weighted least squares with weights 1 / (n L_i)."""
    if model.n_coef > sample.total_obs:
        raise FitError(f"{model.n_coef} coefficients exceed {sample.total_obs} observations")
    D = design_matrix(sample, model)
    w = sample.obs_weights
    Q, R, piv = _weighted_qr(D, w)
    _rank_check(R, piv, model)
    z = Q.T @ (np.sqrt(w) * sample.responses)
    c = np.empty(model.n_coef)
    c[piv] = linalg.solve_triangular(R, z, check_finite=False)
    return model.with_coef(c)


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------

@dataclass
class CoefficientConstraintSet:
    rows: sparse.csr_matrix
    kinds: list = field(default_factory=list)  # per row: "sign", "weighted", "bernstein", "derivative"

    @property
    def m(self) -> int:
        return self.rows.shape[0]


def _support_index(basis: CovariateBasis, interval) -> np.ndarray:
    """Hats whose open support meets the open interval, i.e. peak in [a, b]."""
    a, b = interval
    lo, _, hi = _hats(basis.knots)
    return np.flatnonzero((lo < b) & (hi > a))


def _dense_points(basis: CovariateBasis, interval, n=DENSE_POINTS):
    a, b = interval
    bp = basis.knots.breakpoints
    return np.unique(np.concatenate([np.linspace(a, b, n), bp[(bp >= a) & (bp <= b)]]))


def _check_knots(basis: CovariateBasis, interval, j):
    bp = basis.knots.breakpoints
    for e in interval:
        if not np.any(np.abs(bp - e) <= 1e-12):
            raise ConfigError(f"covariate {j}: knots {list(bp)} do not include endpoint {e}")


def _bernstein_points(basis: CovariateBasis, interval):
    """Evaluation points and the map from their values to Bernstein control points.

    On each knot span the fit is a polynomial of degree 2 (I) or 3 (C); it is
    nonnegative there whenever its Bernstein control points are.
    """
    d = 2 if basis.family == "I" else 3
    x = np.arange(d + 1) / d
    coll = np.array([[comb(d, k) * xr ** k * (1 - xr) ** (d - k) for k in range(d + 1)] for xr in x])
    to_ctrl = np.linalg.inv(coll)
    a, b = interval
    bp = basis.knots.breakpoints
    bp = bp[(bp >= a - 1e-12) & (bp <= b + 1e-12)]
    return [(u + (v - u) * x, to_ctrl) for u, v in zip(bp[:-1], bp[1:])]


def coefficient_constraints(model: SplineModel, hypothesis: Hypothesis, reduced: bool = True,
                            positivity: str = "knots") -> CoefficientConstraintSet:
    """Translate the hypothesis into rows R with R c >= 0.

    ``reduced`` uses coefficient signs where the basis allows it; otherwise
    derivative rows are evaluated on a dense grid of each interval.

    ``positivity`` picks the rows for sign constraints on the function itself:
    "knots" evaluates an I-spline fit at the knots of the interval (the
    weighted coefficient sums), "bernstein" requires the Bernstein control
    points of every knot span to be nonnegative (sufficient on the whole
    interval), and "dense" evaluates on a dense grid. C-spline bases have no
    knot rule and use "bernstein" in place of "knots".
    """
    if positivity not in POSITIVITY_RULES:
        raise ConfigError(f"unknown positivity rule {positivity!r}; expected one of {POSITIVITY_RULES}")
    n = model.n_coef
    rows, kinds = [], []

    def add(vec, kind):
        rows.append(vec)
        kinds.append(kind)

    for c in hypothesis.constraints:
        j = c.covariate
        if not 0 <= j < len(model.bases):
            raise ConfigError(f"constraint refers to covariate {j}, model has {len(model.bases)}")
        basis = model.bases[j]
        blk = model.block(j)
        sg = c.shape.sign
        _check_knots(basis, c.interval, j)
        kind = c.shape.kind
        if kind == "convex" and basis.family != "C":
            raise ConfigError(f"covariate {j}: curvature constraints need a C-spline basis")

        def basis_row(t, deriv):
            v = np.zeros(n)
            v[blk] = basis.columns(np.atleast_1d(t), deriv)[0]
            return v

        if kind == "convex" or (kind == "monotone" and basis.family == "I"):
            if reduced:
                for k in _support_index(basis, c.interval):
                    v = np.zeros(n)
                    v[blk.start + basis.coef_index(k)] = sg
                    add(v, "sign")
            else:
                deriv = 2 if kind == "convex" else 1
                for t in _dense_points(basis, c.interval):
                    add(sg * basis_row(t, deriv), "derivative")
        elif kind == "monotone":
            # C basis: beta' is monotone wherever curvature is constrained
            cover = [o for o in hypothesis.for_covariate(j) if o.shape.kind == "convex"
                     and o.interval[0] <= c.interval[0] and o.interval[1] >= c.interval[1]]
            if cover and reduced:
                cs = cover[0].shape.sign
                at = c.interval[0] if cs == sg else c.interval[1]
                add(sg * basis_row(at, 1), "derivative")
            else:
                for t in _dense_points(basis, c.interval):
                    add(sg * basis_row(t, 1), "derivative")
        else:
            rule = positivity if reduced else "dense"
            if rule == "knots" and basis.family == "C":
                rule = "bernstein"
            if rule == "bernstein":
                spans = _bernstein_points(basis, c.interval)
                for i, (pts, to_ctrl) in enumerate(spans):
                    vals = np.array([basis_row(t, 0) for t in pts])
                    ctrl = to_ctrl @ vals
                    # end control points are the values at the knots; add each once
                    keep = range(0 if i == 0 else 1, len(pts))
                    for r in keep:
                        add(sg * ctrl[r], "bernstein")
            else:
                if rule == "knots":
                    bp = basis.knots.breakpoints
                    pts = bp[(bp >= c.interval[0] - 1e-12) & (bp <= c.interval[1] + 1e-12)]
                else:
                    pts = _dense_points(basis, c.interval)
                for t in pts:
                    add(sg * basis_row(t, 0), "weighted")
    R = sparse.csr_matrix(np.array(rows) if rows else np.zeros((0, n)))
    R.eliminate_zeros()
    return CoefficientConstraintSet(R, kinds)


def normal_gram(sample: LongitudinalSample, model: SplineModel, D=None) -> np.ndarray:
    D = design_matrix(sample, model) if D is None else D
    return D.T @ (sample.obs_weights[:, None] * D)


def constrained_fit(sample: LongitudinalSample, model: SplineModel, hypothesis: Hypothesis,
                    reduced: bool = True, positivity: str = "knots",
                    opts: SolverOptions | None = None) -> SplineModel:
    """Least squares subject to the coefficient constraints of ``hypothesis``."""
    free = unconstrained_fit(sample, model)
    cons = coefficient_constraints(model, hypothesis, reduced, positivity)
    proj = ConeProjector(normal_gram(sample, model), cons.rows, opts)
    sol = proj.project(free.coef)
    return model.with_coef(sol.x, sol)


def rss(sample: LongitudinalSample, model: SplineModel) -> float:
    r = sample.responses - design_matrix(sample, model) @ model.coef
    return float(np.sum(sample.obs_weights * r * r))


class SplinePlan:
    """Response-independent pieces of a spline fit, reused across bootstrap replicates."""

    engine = "spline"

    def __init__(self, sample: LongitudinalSample, model: SplineModel,
                 hypothesis: Hypothesis | None, quad_grid=None,
                 opts: SolverOptions | None = None, positivity: str = "knots"):
        self.model = SplineModel(model.bases)
        D = design_matrix(sample, self.model)
        if self.model.n_coef > sample.total_obs:
            raise FitError(f"{self.model.n_coef} coefficients exceed {sample.total_obs} observations")
        w = sample.obs_weights
        Q, R, piv = _weighted_qr(D, w)
        _rank_check(R, piv, self.model)
        Rinv_Qt = linalg.solve_triangular(R, Q.T, check_finite=False) * np.sqrt(w)[None, :]
        S = np.empty_like(Rinv_Qt)
        S[piv] = Rinv_Qt
        self.smoother = S
        self.fit_map = D
        self.gram = D.T @ (w[:, None] * D)
        rows = (coefficient_constraints(self.model, hypothesis, positivity=positivity).rows
                if hypothesis is not None else sparse.csr_matrix((0, self.model.n_coef)))
        self.projector = ConeProjector(self.gram, rows, opts)
        if quad_grid is None:
            knots = sorted({k for b in self.model.bases for k in b.knots.interior})
            quad_grid = make_grid(hypothesis, extra=knots)
        self.quad_grid = np.asarray(quad_grid, dtype=float)
        self._eval = [b.columns(self.quad_grid) for b in self.model.bases]

    def unconstrained(self, y) -> np.ndarray:
        return self.smoother @ y

    def constrained(self, theta) -> QpSolution:
        return self.projector.project(theta)

    def beta_grid(self, theta) -> np.ndarray:
        return np.column_stack([E @ theta[self.model.block(j)] for j, E in enumerate(self._eval)])

    def fitted(self, theta) -> np.ndarray:
        return self.fit_map @ theta

    def beta_at(self, theta, t) -> np.ndarray:
        return self.model.evaluate(t, coef=np.asarray(theta))

    def metadata(self) -> dict:
        return {"engine": "spline", **self.model.metadata()}


def equispaced_knots(count: int) -> tuple[float, ...]:
    return tuple((np.arange(1, count + 1) / (count + 1)).tolist())


def select_knots(sample: LongitudinalSample, hypothesis: Hypothesis | None = None,
                 candidate_counts=DEFAULT_KNOT_COUNTS, folds: int = 5, seed=0):
    """Pick the number of equispaced interior knots by subject-level CV.

    Constraint endpoints are always appended to the affected covariate.
    Returns ``(model, count, errors)``; ties go to fewer knots.
    """
    if sample.n < folds:
        raise DataError(f"cross-validation needs at least {folds} subjects, got {sample.n}")
    assign = _cv_folds(sample.n, folds, seed)
    errors = {}
    for count in sorted(int(c) for c in candidate_counts):
        model = build_models(sample.p, hypothesis, equispaced_knots(count))
        total = 0.0
        for f in range(folds):
            train = sample.subset(np.flatnonzero(assign != f))
            test = sample.subset(np.flatnonzero(assign == f))
            try:
                fit = unconstrained_fit(train, model)
            except FitError:
                total = np.inf
                break
            total += prediction_error(test, fit.evaluate) * test.n
        errors[count] = total / sample.n
    finite = {k: e for k, e in errors.items() if np.isfinite(e)}
    if not finite:
        raise FitError("no knot count could be fit on every fold")
    best = min(finite.values())
    slack = 1e-10 * max(best, float(np.sum(sample.obs_weights * sample.responses ** 2)))
    count = min(k for k, e in finite.items() if e <= best + slack)
    return build_models(sample.p, hypothesis, equispaced_knots(count)), count, errors
