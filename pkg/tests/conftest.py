import numpy as np
import pytest

from trackvo.geometry import Intrinsics, Pose, so3_exp


@pytest.fixture
def intr():
    """The stock VGA camera used across the suite."""
    return Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_rotation(rng, scale=1.0):
    return so3_exp(rng.normal(size=3) * scale)


def random_pose(rng, rot_scale=0.5, trans_scale=1.0):
    return Pose(random_rotation(rng, rot_scale), rng.normal(size=3) * trans_scale)


def random_rigid(rng):
    """A world-frame rigid transform g for gauge-invariance checks."""
    return random_pose(rng, rot_scale=1.0, trans_scale=2.0)
