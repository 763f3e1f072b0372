import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from softproprio.simulator import ActuatorSpec, undeformed_mesh

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def spec():
    return ActuatorSpec()


@pytest.fixture(scope="session")
def straight_mesh(spec):
    return undeformed_mesh(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_nearest(queries, targets):
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    idx = np.empty(len(q), dtype=np.int64)
    dist = np.empty(len(q))
    for i, p in enumerate(q):
        best, best_j = np.inf, -1
        for j, r in enumerate(t):
            d = np.sqrt(np.sum((p - r) ** 2))
            if d < best:
                best, best_j = d, j
        idx[i], dist[i] = best_j, best
    return idx, dist


# measured values from the acceptance suite, printed after the run
ACCEPTANCE_METRICS: dict[str, str] = {}


@pytest.fixture
def record_metric():
    def record(name, value):
        ACCEPTANCE_METRICS[name] = value if isinstance(value, str) else repr(_plain(value))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_METRICS:
        return
    terminalreporter.section("acceptance measurements")
    for name, value in ACCEPTANCE_METRICS.items():
        terminalreporter.write_line(f"{name}: {value}")


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (list, tuple)):
        return type(value)(_plain(v) for v in value)
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value
