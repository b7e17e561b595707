import numpy as np
import pytest

from planestitch.synth import SceneSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_pair():
    """Noiseless 256x256 textured pair with a moderate planted homography."""
    return generate(SceneSpec(size=256, h_magnitude=0.1, seed=3))


@pytest.fixture(scope="session")
def pair_512():
    return generate(SceneSpec(size=512, h_magnitude=0.15, seed=7))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
