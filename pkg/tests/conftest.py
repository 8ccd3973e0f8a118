import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from smoothps.data import Sample

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_sample(n=200, d=2, seed=0, rate_shift=0.0):
    """Logistic MAR response on standard normal covariates, linear outcome."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = 1.0 + X.sum(axis=1) + rng.standard_normal(n)
    eta = 0.5 + rate_shift + 0.6 * X[:, 0] - (0.4 * X[:, 1] if d > 1 else 0.0)
    delta = rng.random(n) < 1.0 / (1.0 + np.exp(-eta))
    delta[:3] = True
    delta[3] = False
    return Sample(X, np.where(delta, y, np.nan), delta)


@pytest.fixture
def sample():
    return make_sample()


@pytest.fixture
def toy():
    """Four units, two respondents: weights (2, 2) are forced by calibration."""
    return Sample(np.array([[1.0], [2.0], [1.5], [1.5]]), np.array([3.0, 5.0, np.nan, np.nan]))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
