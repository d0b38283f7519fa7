import numpy as np
import pytest

from weakcube.geometry import CameraIntrinsics, rotation_about
from weakcube.losses import ClassPrior


@pytest.fixture
def cam():
    return CameraIntrinsics(260.0, 160.0, 120.0, 320, 240)


@pytest.fixture
def chair():
    return ClassPrior("chair", (0.55, 0.90, 0.55), (0.06, 0.08, 0.06))


def random_rotation(rng):
    return rotation_about(rng.normal(size=3), rng.uniform(0, np.pi))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
