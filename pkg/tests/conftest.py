import numpy as np
import pytest
from hypothesis import settings

from mnlrl.envs import random_instance

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def small_mdp():
    return random_instance(d=3, H=2, states_per_stage=4, A=3, U=3, B=1.0, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance verdicts

VERDICTS: dict = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one acceptance line; a test that dies first records FAIL."""
    seen = []

    def record(n, ok, detail):
        seen.append(n)
        VERDICTS[n] = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
        print(VERDICTS[n])
        return ok

    yield record
    n = request.node.get_closest_marker("criterion")
    if n is not None and n.args[0] not in seen:
        VERDICTS[n.args[0]] = f"CRITERION {n.args[0]} FAIL: test aborted before a verdict"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
