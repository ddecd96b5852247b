import numpy as np
import pytest

from mmsde.monotone import Box, NormalCone, ZeroOperator
from mmsde.multiscale import CoefficientSet, SlowFastSystem


def worked_coeffs(m=1.0, b1=None, b1_y=True, sigma1_scale=1.0, b2=None):
    """Reflected OU example: b1 = 1 - y, sigma1 = const, b2 = m - y/2, sigma2 = 1."""
    def _b1(x, y):
        return 1.0 - y + 0 * x
    def _s1(x, y):
        return sigma1_scale * np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (1, 1))
    def _b2(x, y):
        return m - 0.5 * y + 0 * x
    def _s2(x, y):
        return np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (1, 1))
    return CoefficientSet(b1 or _b1, _s1, b2 or _b2, _s2, 1, 1, 1, 1,
                          L_b1s1=1.0, L_b2s2=0.25, beta=1.0, sigma2_bound=1.0,
                          b1_depends_on_y=b1_y, sigma1_depends_on_y=False)


HALF_LINE = NormalCone(Box([0.0], [np.inf]))


def worked_system(eps=0.2, gamma=None, coeffs=None, x0=0.5, A1=HALF_LINE):
    gamma = eps ** 1.5 if gamma is None else gamma
    return SlowFastSystem(A1, ZeroOperator(1), coeffs or worked_coeffs(), eps, gamma,
                          [x0], [0.0], 1.0)


@pytest.fixture
def system():
    return worked_system()


# Domain-preservation recorder: every PathSample built anywhere in the suite
# goes through ``build_path``; wrap it to tally states and the worst distance
# to the operator domain.

import mmsde.multiscale as _ms  # noqa: E402
import mmsde.paths as _paths  # noqa: E402

DOMAIN_TALLY = {"paths": 0, "states": 0, "max_violation": 0.0, "over_tol": 0}
_original_build_path = _paths.build_path


def _recording_build_path(grid, states, dK, domain):
    path = _original_build_path(grid, states, dK, domain)
    dist = domain.distance(path.states)
    DOMAIN_TALLY["paths"] += int(np.prod(path.states.shape[:-2], dtype=int))
    DOMAIN_TALLY["states"] += int(dist.size)
    DOMAIN_TALLY["max_violation"] = max(DOMAIN_TALLY["max_violation"], float(np.max(dist)))
    DOMAIN_TALLY["over_tol"] += int(np.sum(dist > 1e-9))
    return path


@pytest.fixture(scope="session", autouse=True)
def record_domain_preservation():
    _paths.build_path = _recording_build_path
    _ms.build_path = _recording_build_path
    yield DOMAIN_TALLY
    _paths.build_path = _original_build_path
    _ms.build_path = _original_build_path


def pytest_terminal_summary(terminalreporter):
    t = DOMAIN_TALLY
    if t["states"]:
        verdict = "PASS" if t["over_tol"] == 0 else "FAIL"
        terminalreporter.write_line(
            f"domain preservation over the full suite: {verdict} ({t['paths']} paths, "
            f"{t['states']} states, max distance {t['max_violation']:.3g}, "
            f"{t['over_tol']} states beyond 1e-9)")


def pytest_configure(config):
    config.addinivalue_line("markers", "runs_last: run after the rest of the suite")


def pytest_collection_modifyitems(items):
    items.sort(key=lambda item: item.get_closest_marker("runs_last") is not None)
