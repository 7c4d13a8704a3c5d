import numpy as np
import pytest

from partshape.longdata import from_arrays


def make_sample(n, betas, noise=0.0, seed=0, p_extra=0, intercept=True, times_per=(5, 12)):
    """Sample with covariates (1, U...) and responses sum_j X_j beta_j(T) + noise.

    ``betas`` is a list of callables, one per covariate (intercept included).
    """
    rng = np.random.default_rng(seed)
    p = len(betas)
    ids, ts, ys, xs = [], [], [], []
    for i in range(n):
        L = rng.integers(times_per[0], times_per[1] + 1)
        t = rng.random(L)
        x = rng.random(p)
        if intercept:
            x[0] = 1.0
        mean = sum(x[j] * betas[j](t) for j in range(p))
        eps = noise * (rng.standard_normal() * np.sin(2 * np.pi * t) + 0.3 * rng.standard_normal(L))
        ids += [i] * L
        ts += list(t)
        ys += list(mean + eps)
        xs += [x] * L
    return from_arrays(np.array(ids), np.array(ts), np.array(ys), np.array(xs), domain=(0.0, 1.0))


@pytest.fixture
def sampler():
    return make_sample


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
