import numpy as np
import pytest

from config import TrainConfig
from model import Camera, GaussianSet, random_rotations


def make_set(means, log_scales=None, rotations=None, opacities=None, colors=None) -> GaussianSet:
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = means.shape[0]
    if log_scales is None:
        log_scales = np.full((n, 3), np.log(0.05))
    if rotations is None:
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    if opacities is None:
        opacities = np.full(n, 0.5)
    if colors is None:
        colors = np.full((n, 3), 0.5)
    opacities = np.asarray(opacities, dtype=np.float64)
    return GaussianSet(means, log_scales, rotations, np.log(opacities / (1.0 - opacities)), colors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tile_camera():
    """16x16 single-tile camera at the origin looking down +z; pixel (8, 8) is on the optical axis."""
    return Camera(fx=16.0, fy=16.0, cx=8.0, cy=8.0, width=16, height=16)


@pytest.fixture
def small_camera():
    return Camera(fx=40.0, fy=40.0, cx=15.5, cy=13.5, width=32, height=28)


@pytest.fixture
def random_set(rng):
    def build(n: int, spread: float = 0.6, depth: float = 2.0, scale_range=(0.03, 0.2)) -> GaussianSet:
        lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
        means = np.column_stack([
            rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(depth - 0.5, depth + 0.5, n),
        ])
        return GaussianSet(
            means=means,
            log_scales=rng.uniform(lo, hi, (n, 3)),
            rotations=random_rotations(n, rng),
            opacity_logits=rng.normal(0.0, 1.5, n),
            colors=rng.uniform(0.0, 1.0, (n, 3)),
        )

    return build


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        iterations=40,
        group_interval=5,
        activate_at=10,
        densify_from=5,
        densify_until=30,
        densify_interval=10,
        merge_densify_at=25,
        merge_optimize_at=35,
        reset_interval=20,
        gt_count=60,
        num_views=6,
        resolution=32,
        test_every=3,
        init_count=40,
        eval_interval=20,
        quiet=True,
    )
