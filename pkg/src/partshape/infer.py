"""Partial-shape test: L2 statistic between constrained and unconstrained fits,
calibrated by a subject-level (clustered) wild bootstrap under the null.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernelfit, splinefit
from .kernelfit import FitError, Kernel, KernelPlan, KernelSpec, make_grid
from .longdata import DataError, Hypothesis, LongitudinalSample, normalize_domain
from .qpcore import QpError, SolverOptions

MAX_FAILURE_RATE = 0.05
GOLDEN = np.sqrt(5.0)


class BootstrapError(RuntimeError):
    pass


class Multiplier(str, enum.Enum):
    MAMMEN = "mammen"
    RADEMACHER = "rademacher"

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.random(size)
        if self is Multiplier.RADEMACHER:
            return np.where(u < 0.5, -1.0, 1.0)
        p_low = (GOLDEN + 1) / (2 * GOLDEN)
        return np.where(u < p_low, -(GOLDEN - 1) / 2, (GOLDEN + 1) / 2)


@dataclass(frozen=True)
class KernelEngine:
    """Kernel engine settings; ``bandwidth=None`` selects it by cross-validation."""

    bandwidth: float | None = None
    kernel: Kernel = Kernel.EPANECHNIKOV
    candidates: tuple[float, ...] = kernelfit.DEFAULT_BANDWIDTHS
    grid_size: int = kernelfit.DEFAULT_GRID_SIZE

    name = "kernel"


@dataclass(frozen=True)
class SplineEngine:
    """Spline engine settings; ``knots=None`` selects an equispaced count by CV.

    ``per_covariate`` overrides the shared interior knots for single
    covariates, as ``((j, (k1, k2, ...)), ...)``.
    """

    knots: tuple[float, ...] | None = None
    per_covariate: tuple = ()
    candidates: tuple[int, ...] = splinefit.DEFAULT_KNOT_COUNTS
    positivity: str = "knots"
    grid_size: int = kernelfit.DEFAULT_GRID_SIZE

    name = "spline"


@dataclass(frozen=True)
class TestSpec:
    hypothesis: Hypothesis
    engine: KernelEngine | SplineEngine = field(default_factory=KernelEngine)
    B: int = 250
    alpha: float = 0.05
    seed: int | tuple = 0
    multiplier: Multiplier = Multiplier.MAMMEN
    cv_folds: int = 5
    solver: SolverOptions = field(default_factory=SolverOptions)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "multiplier", Multiplier(self.multiplier))


@dataclass
class TestReport:
    d_observed: float
    d_bootstrap: np.ndarray
    p_value: float
    reject: bool
    alpha: float
    engine: dict
    failures: int = 0
    ties: int = 0
    kkt_max: float = 0.0
    timing: dict = field(default_factory=dict)
    theta_hat: np.ndarray | None = field(default=None, repr=False)
    theta_tilde: np.ndarray | None = field(default=None, repr=False)
    plan: object = field(default=None, repr=False)

    __test__ = False

    def estimates(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(constrained, unconstrained) coefficient values at unit times ``t``."""
        return self.plan.beta_at(self.theta_hat, t), self.plan.beta_at(self.theta_tilde, t)

    @property
    def B(self) -> int:
        return int(self.d_bootstrap.size)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "d_observed": self.d_observed,
            "p_value": self.p_value,
            "reject": self.reject,
            "alpha": self.alpha,
            "B": self.B,
            "failures": self.failures,
            "ties": self.ties,
            "kkt_max": self.kkt_max,
            "engine": self.engine,
            "d_bootstrap": [None if not np.isfinite(v) else float(v) for v in self.d_bootstrap],
        }
        if timing:
            out["timing"] = self.timing
        return out


# ---------------------------------------------------------------------------
# statistic
# ---------------------------------------------------------------------------

def trapezoid_weights(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
        raise ValueError("quadrature grid must be strictly increasing with at least two points")
    h = np.diff(g)
    w = np.zeros_like(g)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def covariate_second_moment(design) -> np.ndarray:
    X = np.asarray(design, dtype=float)
    return X.T @ X / X.shape[0]


def test_statistic(design, constrained, unconstrained, grid) -> float:
    """D_n = integral of Delta' Sigma_X Delta with Delta = constrained - unconstrained.

    ``constrained`` and ``unconstrained`` are (len(grid), p) evaluations.
    """
    bh = np.asarray(constrained, dtype=float)
    bt = np.asarray(unconstrained, dtype=float)
    X = np.asarray(design, dtype=float)
    g = np.asarray(grid, dtype=float)
    if bh.shape != bt.shape or bh.shape != (g.size, X.shape[1]):
        raise ValueError(f"estimates {bh.shape} / {bt.shape} do not match grid {g.size} x p={X.shape[1]}")
    delta = bh - bt
    quad = np.einsum("qj,jk,qk->q", delta, covariate_second_moment(X), delta)
    return float(trapezoid_weights(g) @ quad)


test_statistic.__test__ = False


def per_subject_statistic(design, constrained, unconstrained, grid) -> float:
    """Direct form: mean over subjects of the integrated squared X_i' Delta."""
    X = np.asarray(design, dtype=float)
    delta = np.asarray(constrained, dtype=float) - np.asarray(unconstrained, dtype=float)
    w = trapezoid_weights(grid)
    total = 0.0
    for x in X:
        total += w @ (delta @ x) ** 2
    return float(total / X.shape[0])


# ---------------------------------------------------------------------------
# plans and bootstrap
# ---------------------------------------------------------------------------

def _seed_entropy(seed) -> list[int]:
    return [int(s) for s in (seed if isinstance(seed, (tuple, list)) else (seed,))]


def replicate_rng(seed, b: int) -> np.random.Generator:
    """Independent stream for bootstrap replicate ``b``."""
    return np.random.default_rng(np.random.SeedSequence(_seed_entropy(seed) + [int(b)]))


def build_plan(sample: LongitudinalSample, spec: TestSpec):
    """Fit plan for an engine whose tuning parameters are fixed."""
    eng = spec.engine
    hyp = spec.hypothesis
    if isinstance(eng, KernelEngine):
        if eng.bandwidth is None:
            raise ValueError("kernel bandwidth is unset; use run_test to select it")
        grid = make_grid(hyp, size=eng.grid_size)
        return KernelPlan(sample, KernelSpec(eng.bandwidth, eng.kernel), hyp, grid, spec.solver)
    if eng.knots is None:
        raise ValueError("spline knots are unset; use run_test to select them")
    model = splinefit.build_models(sample.p, hyp, eng.knots, dict(eng.per_covariate))
    knots = sorted({k for b in model.bases for k in b.knots.interior})
    grid = make_grid(hyp, size=eng.grid_size, extra=knots)
    return splinefit.SplinePlan(sample, model, hyp, grid, spec.solver, eng.positivity)


class _Statistic:
    def __init__(self, plan, design):
        self.plan = plan
        self.sigma = covariate_second_moment(design)
        self.w = trapezoid_weights(plan.quad_grid)

    def __call__(self, theta_hat, theta_tilde) -> float:
        d = self.plan.beta_grid(theta_hat) - self.plan.beta_grid(theta_tilde)
        return float(self.w @ np.einsum("qj,jk,qk->q", d, self.sigma, d))

    def energy(self, theta) -> float:
        b = self.plan.beta_grid(theta)
        return float(self.w @ np.einsum("qj,jk,qk->q", b, self.sigma, b))


def wild_bootstrap(sample: LongitudinalSample, spec: TestSpec, plan=None) -> TestReport:
    """Bootstrap p-value for ``spec.hypothesis`` with tuning frozen in ``plan``.

    The p-value is the share of replicates with D* > D_n. Replicates that
    tie D_n up to rounding (both statistics numerically zero relative to the
    fitted signal) count as exceedances so that a perfectly fitting null
    is never rejected.
    """
    t0 = time.perf_counter()
    plan = build_plan(sample, spec) if plan is None else plan
    stat = _Statistic(plan, sample.design)
    y = sample.responses
    theta_tilde = plan.unconstrained(y)
    sol = plan.constrained(theta_tilde)
    d_obs = stat(sol.x, theta_tilde)
    kkt_max = sol.kkt_residual
    null_fit = plan.fitted(sol.x)
    resid = y - null_fit
    tie_tol = 1e-10 * max(stat.energy(theta_tilde), np.finfo(float).tiny)
    t1 = time.perf_counter()

    d_star = np.full(spec.B, np.nan)
    for b in range(spec.B):
        v = spec.multiplier.draw(replicate_rng(spec.seed, b), sample.n)
        ystar = null_fit + v[sample.subject_index] * resid
        try:
            th = plan.unconstrained(ystar)
            s = plan.constrained(th)
            val = stat(s.x, th)
        except (QpError, FitError, np.linalg.LinAlgError, FloatingPointError):
            continue
        if np.isfinite(val):
            d_star[b] = val
            kkt_max = max(kkt_max, s.kkt_residual)
    ok = np.isfinite(d_star)
    failures = int(spec.B - ok.sum())
    if failures > MAX_FAILURE_RATE * spec.B:
        raise BootstrapError(f"{failures} of {spec.B} bootstrap replicates failed")
    good = d_star[ok]
    tie = np.abs(good - d_obs) <= tie_tol
    p = float(np.mean((good > d_obs) | tie))
    return TestReport(
        d_observed=d_obs, d_bootstrap=d_star, p_value=p, reject=bool(p < spec.alpha),
        alpha=spec.alpha, engine=plan.metadata(), failures=failures, ties=int(tie.sum()),
        kkt_max=float(kkt_max),
        timing={"fit_seconds": t1 - t0, "bootstrap_seconds": time.perf_counter() - t1},
        theta_hat=sol.x, theta_tilde=theta_tilde, plan=plan,
    )


def select_tuning(sample: LongitudinalSample, spec: TestSpec) -> tuple[TestSpec, dict]:
    """Fill in an unset bandwidth or knot set by subject-level CV."""
    eng = spec.engine
    seed = _seed_entropy(spec.seed)[0]
    if isinstance(eng, KernelEngine):
        if eng.bandwidth is not None:
            return spec, {}
        h, errors = kernelfit.select_bandwidth(sample, eng.candidates, spec.cv_folds, seed, eng.kernel,
                                               make_grid(spec.hypothesis, size=eng.grid_size))
        new = KernelEngine(h, eng.kernel, eng.candidates, eng.grid_size)
        return _with_engine(spec, new), {"bandwidth": h, "cv_errors": {str(k): v for k, v in errors.items()}}
    if eng.knots is not None:
        return spec, {}
    _, count, errors = splinefit.select_knots(sample, spec.hypothesis, eng.candidates, spec.cv_folds, seed)
    new = SplineEngine(splinefit.equispaced_knots(count), eng.per_covariate, eng.candidates,
                       eng.positivity, eng.grid_size)
    return _with_engine(spec, new), {"knot_count": count, "cv_errors": {str(k): v for k, v in errors.items()}}


def _with_engine(spec: TestSpec, engine) -> TestSpec:
    return TestSpec(spec.hypothesis, engine, spec.B, spec.alpha, spec.seed, spec.multiplier,
                    spec.cv_folds, spec.solver)


def run_test(sample: LongitudinalSample, spec: TestSpec) -> TestReport:
    """Normalize times, select unset tuning by CV, fit both models and bootstrap.

    The hypothesis must already be expressed on the unit time scale.
    """
    t0 = time.perf_counter()
    unit = normalize_domain(sample)
    if unit.n < 2:
        raise DataError("testing needs at least two subjects")
    spec, cv = select_tuning(unit, spec)
    t1 = time.perf_counter()
    report = wild_bootstrap(unit, spec)
    report.engine.update({"B": spec.B, "seed": _seed_entropy(spec.seed),
                          "multiplier": spec.multiplier.value})
    if cv:
        report.engine["cv"] = cv
    report.timing["cv_seconds"] = t1 - t0
    return report
