import math

import numpy as np
import pytest

from fisheye_bev.camera import FisheyeIntrinsics
from fisheye_bev.synth import desk_intrinsics

ACCEPTANCE_LINES = []


def random_intrinsics(rng, width=128, height=108):
    """A random calibration that passes the monotonicity check."""
    while True:
        focal = rng.uniform(0.25, 0.4) * width
        k = rng.uniform(-0.05, 0.05, size=4) * focal * np.array([1.0, 0.3, 0.1, 0.03])
        try:
            return FisheyeIntrinsics(
                focal=focal,
                principal_point=(0.5 * width + rng.uniform(-3, 3), 0.5 * height + rng.uniform(-3, 3)),
                distortion=tuple(k),
                image_size=(width, height),
                theta_max=math.radians(rng.uniform(80.0, 100.0)),
            )
        except ValueError:
            continue


@pytest.fixture
def desk():
    return desk_intrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
