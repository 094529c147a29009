import numpy as np
import pytest

from skillflow.geometry import CameraModel, RigidTransform, se3_exp
from skillflow.synth import default_camera


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cam():
    return CameraModel(fx=500.0, fy=480.0, cx=320.0, cy=240.0, width=640, height=480)


@pytest.fixture
def synth_cam():
    return default_camera()


def random_transform(rng, rot_scale=1.0, trans_scale=0.2) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, rot_scale)
    return se3_exp(np.concatenate([rng.normal(0.0, trans_scale, 3), axis * angle]))


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """record(number, name, ok, detail, seconds) prints one PASS/FAIL line and returns ok."""
    def record(number, name, ok, detail, seconds):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail} [{seconds:.2f} s]"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
