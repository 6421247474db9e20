import numpy as np
import pytest

from transfer_dr.data import Study


def make_study(rng, n=60, N=40, p=1, q=2, intercept=True, shift=0.3):
    """Random two-population study with a mild (y, z) shift between samples."""
    def zmat(m):
        z = rng.normal(size=(m, q))
        if intercept:
            z[:, 0] = 1.0
        return z

    zs, zt = zmat(n), zmat(N)
    ys = rng.normal(size=n)
    yt = rng.normal(loc=shift, size=N)
    xs = rng.normal(size=(n, p)) + ys[:, None] * 0.8 + zs[:, -1:] * 0.5
    return Study(ys, xs, zs, yt, zt, intercept_in_z=intercept)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def study(rng):
    return make_study(rng)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
