import numpy as np
import pytest

from hvfilter.hierarchy import HierarchyConfig, HierarchyError, build_hierarchy, conditioning_pattern
from hvfilter.models import ExpCovariance, ExpKernel


def random_locations(n, seed=0, d=2):
    return np.random.default_rng(seed).uniform(size=(n, d))


def fitted_hierarchy(locs, r=3, M=None):
    """Hierarchy with ``r`` knots per level and the smallest feasible leaf cap."""
    n = len(locs)
    if M is None:
        M = max(1, int(np.ceil(np.log2(max(n / r, 2)))))
    for cap in range(1, n + 1):
        try:
            return build_hierarchy(locs, HierarchyConfig(M, 2, (r,) * M, cap))
        except HierarchyError:
            continue
    raise AssertionError("no feasible leaf cap")


def hv_setup(n, seed=0, r=3, range_=0.3):
    """Locations, hierarchy, pattern and the permuted exponential covariance."""
    locs = random_locations(n, seed)
    h = fitted_hierarchy(locs, r)
    s = conditioning_pattern(h)
    sigma = ExpCovariance(locs[h.global_order], ExpKernel(1.0, range_))
    return h, s, sigma


def random_spd(n, rng):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def dense_gaussian_logpdf(x, mean, cov):
    r = x - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return float(-0.5 * (len(x) * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(cov, r)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
