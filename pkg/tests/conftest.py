import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def toy_a():
    from helpers import toy_model
    return toy_model("A")


@pytest.fixture(scope="session")
def toy_b():
    from helpers import toy_model
    return toy_model("B")


@pytest.fixture(scope="session")
def eval_data():
    from helpers import eval_set
    return eval_set()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance checks")
        for line in lines:
            terminalreporter.write_line(line)
