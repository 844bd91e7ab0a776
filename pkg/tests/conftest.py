import numpy as np
import pytest

from vuwb.liegeom import PoseSE3, Rotation
from vuwb.sensor_models import CameraIntrinsics


def rodrigues(w):
    """Independent matrix-form exponential used as a test oracle."""
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w)
    if th < 1e-12:
        return np.eye(3)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx


def random_rotation(rng):
    q = rng.normal(size=4)
    return Rotation(q / np.linalg.norm(q))


def random_pose(rng, scale=3.0):
    return PoseSE3(random_rotation(rng), rng.uniform(-scale, scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def camera():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640.0, 480.0, 0.1, 50.0)
