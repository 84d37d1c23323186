import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from maskvol.geometry import Aabb, CameraRig, look_at_view

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")
torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_box():
    return Aabb(np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5]))


def identity_view(fx=1.0, fy=1.0, cx=0.0, cy=0.0):
    """Camera whose frame coincides with the LiDAR frame."""
    from maskvol.geometry import CameraView

    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraView(K, np.eye(4))


def identity_rig(fx=1.0, fy=1.0, cx=0.0, cy=0.0, size=(64, 64)):
    return CameraRig((identity_view(fx, fy, cx, cy),), size)


def random_rig(rng, n_views=2, size=(24, 32)):
    views = []
    H, W = size
    for _ in range(n_views):
        center = rng.uniform(-2, 2, 3)
        fwd = rng.normal(size=3)
        fwd[2] *= 0.3
        f = rng.uniform(20, 80)
        views.append(look_at_view(center, fwd, fx=f, fy=f * rng.uniform(0.9, 1.1), cx=W / 2 + rng.uniform(-2, 2), cy=H / 2))
    return CameraRig(tuple(views), size)
