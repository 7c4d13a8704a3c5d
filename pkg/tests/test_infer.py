import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from partshape.infer import (
    BootstrapError, KernelEngine, Multiplier, SplineEngine, TestSpec, build_plan,
    per_subject_statistic, replicate_rng, run_test, test_statistic as d_stat, trapezoid_weights,
    wild_bootstrap,
)
from partshape.longdata import Hypothesis
from tests.conftest import make_sample

INC_HALF = Hypothesis.of((1, (0.0, 0.5), "increasing"))
DEC_ALL = Hypothesis.of((1, (0.0, 1.0), "decreasing"))
ENGINES = [KernelEngine(0.2), SplineEngine((0.5,))]


def test_statistic_trivial_cases():
    g = np.linspace(0, 1, 11)
    X = np.ones((4, 1))
    b = np.random.default_rng(0).standard_normal((11, 1))
    assert d_stat(X, b, b, g) == 0.0
    assert d_stat(X, np.ones((11, 1)), np.zeros((11, 1)), g) == pytest.approx(1.0, abs=1e-15)


def test_statistic_shape_mismatch():
    with pytest.raises(ValueError):
        d_stat(np.ones((3, 2)), np.zeros((5, 2)), np.zeros((5, 1)), np.linspace(0, 1, 5))
    with pytest.raises(ValueError):
        trapezoid_weights([0.0, 0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_factored_matches_per_subject(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((5, 2))
    g = np.sort(rng.random(11))
    a, b = rng.standard_normal((2, 11, 2))
    ref = per_subject_statistic(X, a, b, g)
    assert abs(d_stat(X, a, b, g) - ref) <= 1e-12 * max(1.0, ref)


def test_statistic_relabel_and_scale():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((30, 3))
    g = np.linspace(0, 1, 21)
    a, b = rng.standard_normal((2, 21, 3))
    d = d_stat(X, a, b, g)
    assert d > 0
    assert d_stat(X[rng.permutation(30)], a, b, g) == pytest.approx(d, rel=1e-12)
    assert d_stat(X, 3 * a, 3 * b, g) == pytest.approx(9 * d, rel=1e-12)


@pytest.mark.parametrize("engine", ENGINES, ids=["kernel", "spline"])
def test_response_scaling_scales_statistic(engine):
    s = make_sample(40, [lambda t: 1 + 0 * t, lambda t: np.cos(6 * t)], noise=1.0, seed=2)
    spec = TestSpec(INC_HALF, engine, B=1)
    d1 = wild_bootstrap(s, spec).d_observed
    d2 = wild_bootstrap(s.with_responses(2.5 * s.responses), spec).d_observed
    assert d1 > 0
    assert d2 == pytest.approx(6.25 * d1, rel=1e-8)


@pytest.mark.parametrize("engine", ENGINES, ids=["kernel", "spline"])
def test_statistic_invariant_to_subject_order(engine):
    s = make_sample(30, [lambda t: 1 + 0 * t, lambda t: np.cos(6 * t)], noise=1.0, seed=3)
    spec = TestSpec(INC_HALF, engine, B=1)
    perm = np.random.default_rng(0).permutation(s.n)
    assert wild_bootstrap(s.subset(perm), spec).d_observed == pytest.approx(
        wild_bootstrap(s, spec).d_observed, rel=1e-10)


@pytest.mark.parametrize("mult", list(Multiplier))
def test_multiplier_moments(mult):
    v = mult.draw(np.random.default_rng(4), 20000)
    assert abs(v.mean()) <= 0.1
    assert abs(v.var() - 1) <= 0.1
    if mult is Multiplier.MAMMEN:
        assert abs(np.mean(v ** 3) - 1) <= 0.1


def test_replicate_streams_are_distinct_and_reproducible():
    a = replicate_rng(5, 0).random(4)
    assert np.array_equal(a, replicate_rng(5, 0).random(4))
    assert not np.array_equal(a, replicate_rng(5, 1).random(4))
    assert not np.array_equal(a, replicate_rng((5, 1), 0).random(4))


def test_spec_validation():
    with pytest.raises(ValueError):
        TestSpec(INC_HALF, B=0)
    with pytest.raises(ValueError):
        TestSpec(INC_HALF, alpha=1.0)


@pytest.mark.parametrize("engine", ENGINES, ids=["kernel", "spline"])
def test_single_replicate_p_value(engine):
    s = make_sample(40, [lambda t: 1 + 0 * t, lambda t: np.cos(6 * t)], noise=1.0, seed=5)
    rep = wild_bootstrap(s, TestSpec(INC_HALF, engine, B=1, seed=9))
    assert rep.p_value in (0.0, 1.0) and rep.B == 1


@pytest.mark.parametrize("engine", ENGINES, ids=["kernel", "spline"])
def test_deterministic_given_seed(engine):
    s = make_sample(40, [lambda t: 1 + 0 * t, lambda t: np.cos(6 * t)], noise=1.0, seed=6)
    spec = TestSpec(INC_HALF, engine, B=40, seed=(3, 7))
    a, b = wild_bootstrap(s, spec), wild_bootstrap(s, spec)
    assert a.p_value == b.p_value
    assert np.array_equal(a.d_bootstrap, b.d_bootstrap)


def test_zero_noise_null_has_unit_p_value():
    # responses equal the constrained spline fit exactly: D_n = 0 and all replicates tie
    # (a kernel refit does not reproduce its own interpolant; see the linear-truth case below)
    s = make_sample(40, [lambda t: 1 + 0 * t, lambda t: np.cos(6 * t)], noise=1.0, seed=7)
    spec = TestSpec(INC_HALF, SplineEngine((0.5,)), B=30)
    plan = build_plan(s, spec)
    th = plan.constrained(plan.unconstrained(s.responses)).x
    exact = s.with_responses(plan.fitted(th))
    rep = wild_bootstrap(exact, spec)
    assert rep.d_observed <= 1e-20
    assert rep.p_value == 1.0 and not rep.reject


@pytest.mark.parametrize("engine", ENGINES, ids=["kernel", "spline"])
def test_clear_violation_is_rejected(engine):
    s = make_sample(60, [lambda t: 1 + 0 * t, lambda t: 3 * t], noise=0.5, seed=8)
    rep = wild_bootstrap(s, TestSpec(DEC_ALL, engine, B=100))
    assert rep.p_value == 0.0 and rep.reject
    assert rep.kkt_max <= 1e-8


@pytest.mark.parametrize("engine", ENGINES, ids=["kernel", "spline"])
def test_inactive_constraints_identity(engine):
    s = make_sample(40, [lambda t: 1 + 0 * t, lambda t: 2 * t], seed=9)
    rep = wild_bootstrap(s, TestSpec(Hypothesis.of((1, (0.0, 1.0), "increasing")), engine, B=20))
    assert np.allclose(rep.theta_hat, rep.theta_tilde, atol=1e-8)
    assert rep.d_observed == 0.0 and rep.p_value == 1.0


def test_failed_replicates_raise(monkeypatch):
    from partshape import infer
    from partshape.kernelfit import FitError
    s = make_sample(30, [lambda t: 1 + 0 * t, lambda t: t], noise=1.0, seed=10)
    spec = TestSpec(INC_HALF, KernelEngine(0.2), B=20)
    plan = build_plan(s, spec)
    calls = {"n": 0}
    real = plan.unconstrained

    def flaky(y):
        calls["n"] += 1
        if calls["n"] > 1 and calls["n"] % 4 == 0:  # 5 of the 20 replicates
            raise FitError("boom")
        return real(y)

    monkeypatch.setattr(plan, "unconstrained", flaky)
    with pytest.raises(BootstrapError, match="5 of 20"):
        infer.wild_bootstrap(s, spec, plan)


def test_few_failures_are_tolerated(monkeypatch):
    from partshape.kernelfit import FitError
    s = make_sample(30, [lambda t: 1 + 0 * t, lambda t: t], noise=1.0, seed=10)
    spec = TestSpec(INC_HALF, KernelEngine(0.2), B=20)
    plan = build_plan(s, spec)
    real = plan.unconstrained
    calls = {"n": 0}

    def flaky(y):
        calls["n"] += 1
        if calls["n"] == 3:
            raise FitError("boom")
        return real(y)

    monkeypatch.setattr(plan, "unconstrained", flaky)
    rep = wild_bootstrap(s, spec, plan)
    assert rep.failures == 1 and np.isnan(rep.d_bootstrap).sum() == 1


@pytest.mark.parametrize("engine", [KernelEngine(), SplineEngine()], ids=["kernel", "spline"])
def test_run_test_records_tuning(engine):
    s = make_sample(40, [lambda t: 1 + 0 * t, lambda t: np.cos(6 * t)], noise=1.0, seed=11)
    rep = run_test(s, TestSpec(INC_HALF, engine, B=20))
    assert "cv" in rep.engine
    key = "bandwidth" if engine.name == "kernel" else "knot_count"
    assert key in rep.engine["cv"]
    d = rep.to_dict(timing=False)
    assert "timing" not in d and len(d["d_bootstrap"]) == 20
    con, unc = rep.estimates(np.linspace(0, 1, 5))
    assert con.shape == unc.shape == (5, 2)


@pytest.mark.slow
@pytest.mark.parametrize("engine", ENGINES, ids=["kernel", "spline"])
def test_p_values_roughly_uniform_on_flat_null(engine):
    # least favourable null: beta_1 constant, so the constraint is on its boundary
    ps = []
    for r in range(100):
        s = make_sample(200, [lambda t: 1 + 0 * t, lambda t: 0 * t], noise=1.0, seed=1000 + r)
        ps.append(wild_bootstrap(s, TestSpec(INC_HALF, engine, B=250, seed=r)).p_value)
    ks = stats.kstest(ps, "uniform").statistic
    print(f"{engine.name}: KS distance {ks:.3f}")
    assert ks <= 0.15
