import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from occsplat.body import default_skeleton, template_point_cloud
from occsplat.splat import Camera, GaussianSet, inverse_sigmoid


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def template(skeleton):
    return template_point_cloud(skeleton)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_gaussians(rng, n, center=(0.0, 0.0, 3.0), spread=0.5,
                     scale_range=(0.05, 0.2), opacity_range=(0.2, 0.9)):
    """Well-conditioned random Gaussians in front of an identity camera."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        positions=np.asarray(center) + spread * rng.uniform(-1, 1, (n, 3)),
        rotations=q,
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity_range, n)),
        colors=rng.uniform(0.05, 0.95, (n, 1, 3)),
    )


@pytest.fixture
def small_camera():
    return Camera(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)
