import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedmtd.anomaly import train_ad
from fedmtd.environment import BehaviorClass, EnvConfig, Environment

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_env():
    return Environment.build(EnvConfig(), seed=11)


@pytest.fixture(scope="session")
def default_ad(default_env):
    normals = default_env.sample_many(BehaviorClass.NORMAL, 2000, np.random.default_rng(5))
    return train_ad(normals, seed=3)


# ---------------------------------------------------------------- acceptance report

_REPORT = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """criterion number -> list of (part, passed, detail)."""
    return request.config.stash.setdefault(_REPORT, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(_REPORT, None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(report):
        parts = report[n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{name}: {'ok' if ok else 'FAILED'} ({d})" for name, ok, d in parts)
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {detail}")
