import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("lift3d", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lift3d")


@pytest.fixture(scope="session")
def scene16():
    from lift3d.scenes import build_scene

    return build_scene(2000, n_views=16, image_size=64, operators=("colorquant",))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
