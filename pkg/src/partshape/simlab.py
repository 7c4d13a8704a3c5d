"""Monte Carlo study: data generator, sub-interval scenarios, rejection rates
and integrated squared bias / variance.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .infer import KernelEngine, SplineEngine, TestSpec, run_test, trapezoid_weights
from .longdata import (Hypothesis, LongitudinalSample, SubjectRecord, rescale_to_interval,
                       restrict_to_interval)

log = logging.getLogger(__name__)

N_MODES = 50
XI_CORR = 0.5
WHITE_SD = 0.1
BETA_SHAPE = 1.25
L_RANGE = (5, 15)
P = 4
ALPHAS = (0.05, 0.1)
TESTED = (0, 2)  # beta_1 and beta_3

INTERVALS = ((0.0, 0.5), (0.1, 0.5), (0.2, 0.5), (0.3, 0.5), (0.4, 0.5),
             (0.5, 1.0), (0.6, 1.0), (0.7, 1.0), (0.8, 1.0), (0.9, 1.0))


def true_beta(t) -> np.ndarray:
    """Coefficient functions of the generator; shape (len(t), 4).

    beta_1 = beta_3 rise on [0, 0.5] and fall on [0.5, 1], so "monotone
    increasing on I" holds exactly when I lies in [0, 0.5].
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("t must lie in [0, 1]")
    s = np.sin(np.pi * t)
    return np.column_stack([s, np.cos(2 * np.pi * t), s, 1.0 - t])


def null_holds(interval) -> bool:
    return interval[1] <= 0.5 + 1e-12


@lru_cache(maxsize=1)
def _xi_factor() -> np.ndarray:
    k = np.arange(N_MODES)
    return np.linalg.cholesky(XI_CORR ** np.abs(k[:, None] - k[None, :]))


def _rng(seed) -> np.random.Generator:
    ent = [int(s) for s in (seed if isinstance(seed, (tuple, list)) else (seed,))]
    return np.random.default_rng(np.random.SeedSequence(ent))


def generate_sample(n: int, seed=0) -> LongitudinalSample:
    """Draw ``n`` subjects with right-skewed sampling times and smooth correlated noise."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = _rng(seed)
    L = rng.integers(L_RANGE[0], L_RANGE[1] + 1, size=n)
    U = rng.random((n, 5))
    X = (U[:, :4] + 0.5 * U[:, [4]]) / 1.5
    xi = rng.standard_normal((n, N_MODES)) @ _xi_factor().T
    scale = np.sqrt(2.0) / np.sqrt(np.arange(1, N_MODES + 1))
    freq = 2 * np.pi * np.arange(1, N_MODES + 1)
    subs = []
    for i in range(n):
        t = 1.0 - (1.0 - rng.random(L[i])) ** (1.0 / BETA_SHAPE)
        noise = np.sin(np.outer(t, freq)) @ (xi[i] * scale) + WHITE_SD * rng.standard_normal(L[i])
        y = true_beta(t) @ X[i] + noise
        subs.append(SubjectRecord(X[i], t, y, id=str(i)))
    return LongitudinalSample(tuple(subs), (0.0, 1.0), normalized=True,
                              covariate_names=tuple(f"x{j + 1}" for j in range(P)))


class Mode(str, enum.Enum):
    FULL = "full"
    SUB = "sub"


def scenario_hypothesis(interval) -> Hypothesis:
    return Hypothesis.of(*[(j, tuple(interval), "increasing") for j in TESTED])


@dataclass(frozen=True)
class SimScenario:
    n: int
    interval: tuple[float, float] = (0.0, 0.5)
    engine: KernelEngine | SplineEngine = field(default_factory=KernelEngine)
    R: int = 100
    B: int = 250
    mode: Mode = Mode.FULL
    seed: int = 0
    alphas: tuple[float, ...] = ALPHAS
    eval_points: int = 51

    def __post_init__(self):
        a, b = (float(v) for v in self.interval)
        if not 0 <= a < b <= 1:
            raise ValueError(f"interval {self.interval} is not inside [0, 1]")
        if self.R < 1 or self.B < 1 or self.n < 1:
            raise ValueError("n, R and B must be positive")
        object.__setattr__(self, "interval", (a, b))
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def eval_grid(self) -> np.ndarray:
        return np.linspace(*self.interval, self.eval_points)

    def to_dict(self) -> dict:
        eng = {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in vars(self.engine).items()}
        return {"n": self.n, "interval": list(self.interval), "engine": self.engine.name,
                "engine_settings": eng, "R": self.R, "B": self.B, "mode": self.mode.value,
                "seed": self.seed, "alphas": list(self.alphas), "null_holds": null_holds(self.interval)}


@dataclass
class RunResult:
    run: int
    p_value: float
    d_observed: float
    kkt_max: float
    constrained: np.ndarray | None  # (eval_points, p) on the scenario interval
    unconstrained: np.ndarray | None
    dropped: dict
    tuning: dict
    error: str | None = None


@dataclass
class MonteCarloReport:
    scenario: SimScenario
    gamma: dict
    isb: float
    ivar: float
    isb_unconstrained: float
    ivar_unconstrained: float
    runs: list[RunResult]

    @property
    def p_values(self) -> np.ndarray:
        return np.array([r.p_value for r in self.runs if r.error is None])

    @property
    def failures(self) -> int:
        return sum(r.error is not None for r in self.runs)

    @property
    def kkt_max(self) -> float:
        return max([r.kkt_max for r in self.runs if r.error is None], default=0.0)

    def head(self, R: int) -> "MonteCarloReport":
        """The same study truncated to its first ``R`` runs."""
        if not 1 <= R <= len(self.runs):
            raise ValueError(f"R must lie in 1..{len(self.runs)}")
        return summarize(replace(self.scenario, R=R), self.runs[:R])

    def to_dict(self) -> dict:
        dropped = [r.dropped for r in self.runs if r.dropped]
        return {
            "scenario": self.scenario.to_dict(),
            "gamma": {str(a): g for a, g in self.gamma.items()},
            "isb": self.isb, "ivar": self.ivar,
            "isb_unconstrained": self.isb_unconstrained,
            "ivar_unconstrained": self.ivar_unconstrained,
            "failures": self.failures, "kkt_max": self.kkt_max,
            "mean_dropped": ({k: float(np.mean([d[k] for d in dropped])) for k in dropped[0]}
                             if dropped else {}),
            "p_values": [r.p_value for r in self.runs],
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "montecarlo.json", out / "runs.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "p_value", "d_observed", "kkt_max", "tuning", "error"])
            for r in self.runs:
                w.writerow([r.run, r.p_value, r.d_observed, r.kkt_max,
                            json.dumps(r.tuning, sort_keys=True), r.error or ""])
        return jpath, cpath


def isb_ivar(runs, truth, grid, interval=None) -> tuple[float, float]:
    """Integrated squared bias and variance over ``interval``, divided by its length.

    ``runs`` is (R, len(grid), p); ``truth`` is (len(grid), p).
    """
    est = np.asarray(runs, dtype=float)
    g = np.asarray(grid, dtype=float)
    a, b = (g[0], g[-1]) if interval is None else interval
    if g[0] > a + 1e-12 or g[-1] < b - 1e-12:
        raise ValueError(f"grid [{g[0]}, {g[-1]}] does not cover {interval}")
    keep = (g >= a - 1e-12) & (g <= b + 1e-12)
    g, est, tr = g[keep], est[:, keep], np.asarray(truth, dtype=float)[keep]
    w = trapezoid_weights(g) / (b - a)
    mean = est.mean(axis=0)
    isb = float(w @ np.sum((mean - tr) ** 2, axis=1))
    ivar = float(np.mean([w @ np.sum((e - mean) ** 2, axis=1) for e in est]))
    return isb, ivar


def _run_once(scenario: SimScenario, r: int) -> RunResult:
    sample = generate_sample(scenario.n, (scenario.seed, r))
    a, b = scenario.interval
    pts = scenario.eval_grid
    if scenario.mode is Mode.SUB:
        sample = rescale_to_interval(restrict_to_interval(sample, (a, b)), (a, b))
        hyp = scenario_hypothesis((0.0, 1.0))
        local = (pts - a) / (b - a)
    else:
        hyp = scenario_hypothesis((a, b))
        local = pts
    spec = TestSpec(hyp, scenario.engine, B=scenario.B, alpha=min(scenario.alphas),
                    seed=(scenario.seed, r, 1))
    try:
        rep = run_test(sample, spec)
    except Exception as exc:  # noqa: BLE001 - a failed run is recorded, not fatal
        log.warning("run %d failed: %s", r, exc)
        return RunResult(r, float("nan"), float("nan"), float("nan"), None, None,
                         dict(sample.dropped), {}, f"{type(exc).__name__}: {exc}")
    bh, bt = rep.estimates(np.clip(local, 0.0, 1.0))
    tuning = {k: rep.engine[k] for k in ("bandwidth", "knots") if k in rep.engine}
    return RunResult(r, rep.p_value, rep.d_observed, rep.kkt_max, bh, bt,
                     dict(sample.dropped), tuning)


def _run_star(args):
    return _run_once(*args)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_power_study(scenario: SimScenario, workers: int | None = 1) -> MonteCarloReport:
    """R independent draws, each tested with the scenario hypothesis.

    Every run seeds its data and bootstrap from (seed, r), so the report does
    not depend on ``workers`` or scheduling.
    """
    jobs = [(scenario, r) for r in range(scenario.R)]
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or scenario.R == 1:
        runs = [_run_star(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, scenario.R)) as pool:
            runs = list(pool.map(_run_star, jobs, chunksize=1))
    return summarize(scenario, runs)


def summarize(scenario: SimScenario, runs) -> MonteCarloReport:
    """Rejection rates and ISB / IVar of a list of runs of ``scenario``."""
    runs = list(runs)
    ok = [r for r in runs if r.error is None]
    pv = np.array([r.p_value for r in ok])
    gamma = {a: (float(np.mean(pv < a)) if pv.size else float("nan")) for a in scenario.alphas}
    if ok:
        truth = true_beta(scenario.eval_grid)
        isb, ivar = isb_ivar([r.constrained for r in ok], truth, scenario.eval_grid)
        isb_u, ivar_u = isb_ivar([r.unconstrained for r in ok], truth, scenario.eval_grid)
    else:
        isb = ivar = isb_u = ivar_u = float("nan")
    return MonteCarloReport(scenario, gamma, isb, ivar, isb_u, ivar_u, runs)
