"""Acceptance criteria, each checked at its stated size and tolerance.

Every test prints one ``CRITERION k: PASS|FAIL`` line; a summary of all
lines is printed at the end of the session. Monte Carlo studies are cached
in ``.acceptance_cache/`` keyed by scenario and a hash of the package
sources, so a rerun after a code change recomputes them. Set
``PARTSHAPE_ACCEPTANCE_CACHE`` to move the cache.

The application criterion needs the two trial datasets, which are not
distributed here; point ``PARTSHAPE_CDYSTONIA_CSV`` and
``PARTSHAPE_SCHIZOPHRENIA_CSV`` at CSV exports (see scripts/applications.py).
"""

import hashlib
import json
import os
import pickle
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import partshape
from partshape.infer import (KernelEngine, SplineEngine, TestSpec, per_subject_statistic,
                             test_statistic as d_stat, wild_bootstrap)
from partshape.longdata import Hypothesis
from partshape.qpcore import ConeProjector, difference_rows, pava
from partshape.simlab import Mode, SimScenario, run_power_study
from partshape.splinefit import cspline_basis, ispline_basis
from tests.conftest import make_sample

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))

CACHE = Path(os.environ.get("PARTSHAPE_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
RESULTS: dict[int, str] = {}
ENGINES = {"kernel": KernelEngine(), "spline": SplineEngine()}

pytestmark = pytest.mark.acceptance


def record(k: int, ok: bool, detail: str):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[k] = line
    print(line)
    assert ok, line


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(partshape.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def study(scenario: SimScenario):
    """Run (or load) a Monte Carlo study; returns (report, seconds)."""
    key = hashlib.sha256(json.dumps([scenario.to_dict(), _source_hash()], sort_keys=True).encode())
    path = CACHE / f"{key.hexdigest()[:24]}.pkl"
    if path.exists():
        with path.open("rb") as fh:
            return pickle.load(fh)
    t0 = time.perf_counter()
    rep = run_power_study(scenario, workers=None)
    out = (rep, time.perf_counter() - t0)
    CACHE.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        pickle.dump(out, fh)
    return out


def null_full(engine):
    return study(SimScenario(500, (0.0, 0.5), ENGINES[engine], R=100, B=250, seed=20240501))


def null_smoke(engine):
    return study(SimScenario(100, (0.0, 0.5), ENGINES[engine], R=50, B=100, seed=20240511))


def alternative(engine, n):
    return study(SimScenario(n, (0.5, 1.0), ENGINES[engine], R=100, B=250, seed=20240502))


def short_interval(engine, mode):
    return study(SimScenario(100, (0.4, 0.5), ENGINES[engine], R=50, B=100, mode=mode, seed=20240504))


# ---------------------------------------------------------------------------


def test_criterion_1_type_one_error_band():
    parts, ok = [], True
    for e in ENGINES:
        rep, secs = null_full(e)
        g5, g10 = rep.gamma[0.05], rep.gamma[0.1]
        good = 0.01 <= g5 <= 0.11 and 0.04 <= g10 <= 0.18 and rep.failures == 0
        ok &= good
        parts.append(f"{e}: gamma.05={g5:.2f} gamma.1={g10:.2f} ({secs / 60:.1f} min)")
        smoke, ssecs = null_smoke(e)
        sgood = smoke.gamma[0.05] <= 0.16 and ssecs <= 30 * 60
        ok &= sgood
        parts.append(f"{e} smoke n=100: gamma.05={smoke.gamma[0.05]:.2f} ({ssecs / 60:.1f} min)")
    record(1, ok, "; ".join(parts) + " [bands .05:[0.01,0.11] .1:[0.04,0.18]]")


def test_criterion_2_power_grows_with_n():
    parts, ok = [], True
    for e in ENGINES:
        small, big = alternative(e, 100)[0].gamma[0.05], alternative(e, 500)[0].gamma[0.05]
        ok &= big > small and big > 0.5
        parts.append(f"{e}: gamma.05 n=100 {small:.2f} -> n=500 {big:.2f}")
    record(2, ok, "; ".join(parts) + " [need increase and > 0.5]")


def test_criterion_3_estimation_trend():
    parts, ok = [], True
    for e in ENGINES:
        small = null_smoke(e)[0]
        big = null_full(e)[0].head(50)
        ok &= big.isb < small.isb and big.ivar < small.ivar
        parts.append(f"{e}: ISB {small.isb:.4f}->{big.isb:.4f}, IVar {small.ivar:.4f}->{big.ivar:.4f}")
    record(3, ok, "; ".join(parts) + " (n=100 -> n=500, R=50)")


def test_criterion_4_sub_cohort_bias():
    parts, ok = [], True
    for e in ENGINES:
        full = short_interval(e, Mode.FULL)[0]
        sub = short_interval(e, Mode.SUB)[0]
        ok &= sub.isb >= 2 * full.isb
        parts.append(f"{e}: ISB full {full.isb:.4f}, sub {sub.isb:.4f} "
                     f"(ratio {sub.isb / full.isb:.1f}, sub failures {sub.failures})")
    record(4, ok, "; ".join(parts) + " [need ratio >= 2]")


def test_criterion_5_applications():
    import applications
    paths = {"cdystonia": os.environ.get("PARTSHAPE_CDYSTONIA_CSV"),
             "schizophrenia": os.environ.get("PARTSHAPE_SCHIZOPHRENIA_CSV")}
    missing = [k for k, v in paths.items() if not v or not Path(v).exists()]
    if missing:
        record(5, False, f"dataset(s) {missing} not available in this environment; "
                         "set PARTSHAPE_CDYSTONIA_CSV / PARTSHAPE_SCHIZOPHRENIA_CSV")
    rows = (applications.run_application("cdystonia", applications.load_cdystonia(paths["cdystonia"]))
            + applications.run_application("schizophrenia",
                                           applications.load_schizophrenia(paths["schizophrenia"])))
    bad = [r for r in rows if (r["p_value"] < 0.1) != (r["published"] < 0.1)
           or abs(r["p_value"] - r["published"]) > 0.07]
    detail = ", ".join(f"{r['dataset']}/{r['hypothesis']}/{r['engine']} {r['p_value']:.2f} vs {r['published']:.2f}"
                       for r in bad)
    record(5, not bad and len(rows) == 16, f"{16 - len(bad)}/16 match" + (f"; off: {detail}" if bad else ""))


def test_criterion_6_pava_oracle():
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 41))
        y = rng.standard_normal(d) * rng.uniform(0.1, 10)
        w = rng.uniform(0.1, 10, d)
        x = ConeProjector(np.diag(w), difference_rows(d)).project(y).x
        worst = max(worst, float(np.max(np.abs(x - pava(y, w)))))
    secs = time.perf_counter() - t0
    record(6, worst <= 1e-8 and secs <= 10, f"max error {worst:.2e} over 1000 instances in {secs:.1f} s")


def test_criterion_7_kkt_certificates():
    worst, n = 0.0, 0
    reports = [null_full(e)[0] for e in ENGINES] + [null_smoke(e)[0] for e in ENGINES]
    reports += [alternative(e, n_)[0] for e in ENGINES for n_ in (100, 500)]
    reports += [short_interval(e, m)[0] for e in ENGINES for m in Mode]
    for rep in reports:
        for r in rep.runs:
            if r.error is None:
                worst, n = max(worst, r.kkt_max), n + 1
    record(7, worst <= 1e-8, f"max KKT residual {worst:.2e} over {n} tested samples (all bootstrap fits)")


def test_criterion_8_basis_properties():
    rng = np.random.default_rng(8)
    checks = {}
    for knots in [(), (0.5,), (0.2, 0.45, 0.8), (0.1, 0.12, 0.6)]:
        ends = ispline_basis([0.0, 1.0], knots)[0]
        checks.setdefault("I ends 0/1", []).append(np.allclose(ends[0], 0) and np.allclose(ends[1], 1))
        a, b = np.sort(rng.random((2, 1000)), axis=0)
        checks.setdefault("I monotone", []).append(bool(np.all(ispline_basis(b, knots)[0] >= ispline_basis(a, knots)[0] - 1e-15)))
        t = rng.uniform(1e-3, 1 - 1e-3, 300)
        for k in knots:
            t = t[np.abs(t - k) > 1e-3]
        t = t[:100]
        I, M = ispline_basis(t, knots)
        fd = (ispline_basis(t + 1e-5, knots)[0] - ispline_basis(t - 1e-5, knots)[0]) / 2e-5
        checks.setdefault("I' vs FD 1e-6", []).append(float(np.max(np.abs(fd - M))) <= 1e-6)
        C, dC, d2C = cspline_basis(t, knots)
        checks.setdefault("C'' >= 0", []).append(bool(np.all(d2C >= 0)))
        fd2 = (cspline_basis(t + 1e-4, knots)[0] - 2 * C + cspline_basis(t - 1e-4, knots)[0]) / 1e-8
        checks.setdefault("C'' vs FD 1e-4", []).append(float(np.max(np.abs(fd2 - d2C))) <= 1e-4)
    ok = all(all(v) for v in checks.values())
    record(8, ok, ", ".join(f"{k}: {'ok' if all(v) else 'FAILED'}" for k, v in checks.items()))


def test_criterion_9_statistic_identity():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        n, p, G = int(rng.integers(2, 9)), int(rng.integers(1, 4)), int(rng.integers(5, 16))
        X = rng.standard_normal((n, p))
        g = np.sort(rng.random(G))
        a, b = rng.standard_normal((2, G, p))
        ref = per_subject_statistic(X, a, b, g)
        worst = max(worst, abs(d_stat(X, a, b, g) - ref) / max(1.0, ref))
    record(9, worst <= 1e-12, f"max relative difference {worst:.1e} over 100 instances")


def test_criterion_10_inactive_identity():
    s = make_sample(50, [lambda t: 1 + 0 * t, lambda t: 0.5 + 2 * t, lambda t: 1 - t], seed=10)
    hyp = Hypothesis.of((1, (0.2, 0.8), "increasing"), (2, (0.0, 1.0), "decreasing"))
    parts, ok = [], True
    for name, eng in [("kernel", KernelEngine(0.2)), ("spline", SplineEngine((0.5,)))]:
        rep = wild_bootstrap(s, TestSpec(hyp, eng, B=50, seed=1))
        gap = float(np.max(np.abs(rep.theta_hat - rep.theta_tilde)))
        ok &= gap <= 1e-8 and rep.p_value == 1.0
        parts.append(f"{name}: |constrained - unconstrained| = {gap:.1e}, p = {rep.p_value}")
    record(10, ok, "; ".join(parts))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
