import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=int(os.environ.get("STAFEM_HYPOTHESIS_EXAMPLES", "30")),
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = {}


@pytest.fixture(scope="session")
def report():
    """Record the verdict of an acceptance criterion and print it."""
    def _report(k, ok, detail=""):
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[k] = line
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
