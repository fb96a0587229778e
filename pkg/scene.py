"""
Closed-loop synthetic scenes: a ground-truth Gaussian set, orbit cameras,
targets rendered by our own rasteriser, and the random initialisation the
trainer starts from.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import logging
import math
import typing

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logit

from model import Camera, GaussianSet, load_model, load_ply, random_rotations
from render import render_image

if typing.TYPE_CHECKING:
    from typing import *

    from config import TrainConfig


logger = logging.getLogger(__name__)

BOX_HALF = 0.5
GT_SCALE_RANGE = (0.005, 0.05)
ORBIT_RADIUS = 2.2
FOCAL_FACTOR = 1.1
INIT_OPACITY = 0.1
KNN = 3


@dataclass
class SyntheticScene:
    gt: GaussianSet
    cameras: List[Camera]
    targets: List[np.ndarray]
    train_ids: np.ndarray
    test_ids: np.ndarray
    background: np.ndarray

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.gt.means.min(axis=0), self.gt.means.max(axis=0)


def make_gt_gaussians(count: int, rng: np.random.Generator) -> GaussianSet:
    lo, hi = np.log(GT_SCALE_RANGE[0]), np.log(GT_SCALE_RANGE[1])
    return GaussianSet(
        means=rng.uniform(-BOX_HALF, BOX_HALF, size=(count, 3)),
        log_scales=rng.uniform(lo, hi, size=(count, 3)),
        rotations=random_rotations(count, rng),
        opacity_logits=logit(rng.beta(2.0, 2.0, size=count)),
        colors=rng.uniform(0.0, 1.0, size=(count, 3)),
    )


def orbit_cameras(num_views: int, resolution: int, radius: float = ORBIT_RADIUS,
                  focal_factor: float = FOCAL_FACTOR) -> List[Camera]:
    """Views on a sphere around the origin (golden-spiral directions), all looking at the centre."""
    golden = math.pi * (3.0 - math.sqrt(5.0))
    cameras = []
    for i in range(num_views):
        z = 1.0 - (2.0 * i + 1.0) / num_views
        r = math.sqrt(max(0.0, 1.0 - z * z))
        eye = radius * np.array([r * math.cos(golden * i), r * math.sin(golden * i), z])
        cameras.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                                      resolution, resolution, focal_factor * resolution))
    return cameras


def split_views(num_views: int, test_every: int) -> Tuple[np.ndarray, np.ndarray]:
    ids = np.arange(num_views)
    test = ids % test_every == 0
    return ids[~test], ids[test]


def load_gt(path: Union[str, Path]) -> GaussianSet:
    return load_ply(path) if str(path).lower().endswith(".ply") else load_model(path)


def make_scene(cfg: TrainConfig) -> SyntheticScene:
    rng = np.random.default_rng(cfg.seed)
    gt = load_gt(cfg.scene_path) if cfg.scene_path else make_gt_gaussians(cfg.gt_count, rng)
    cameras = orbit_cameras(cfg.num_views, cfg.resolution)
    background = np.asarray(cfg.background, dtype=np.float64)
    targets = [render_image(gt, cam, background) for cam in cameras]
    train_ids, test_ids = split_views(cfg.num_views, cfg.test_every)
    logger.info("%d ground-truth primitives, %d train / %d test views", gt.count, train_ids.size, test_ids.size)
    return SyntheticScene(gt, cameras, targets, train_ids, test_ids, background)


def knn_log_scales(means: np.ndarray, k: int = KNN) -> np.ndarray:
    """Isotropic log scale from the RMS distance to the k nearest neighbours."""
    n = means.shape[0]
    if n < 2:
        return np.full((n, 3), np.log(0.01))
    k = min(k, n - 1)
    dist, _ = cKDTree(means).query(means, k=k + 1)
    mean_sq = np.maximum((dist[:, 1:] ** 2).mean(axis=1), 1e-7)
    return np.repeat(np.log(np.sqrt(mean_sq))[:, None], 3, axis=1)


def random_init(count: int, bounds: Tuple[np.ndarray, np.ndarray], rng: np.random.Generator) -> GaussianSet:
    lo, hi = bounds
    means = rng.uniform(lo, hi, size=(count, 3))
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    return GaussianSet(
        means=means,
        log_scales=knn_log_scales(means),
        rotations=rotations,
        opacity_logits=np.full(count, logit(INIT_OPACITY)),
        colors=rng.uniform(0.0, 1.0, size=(count, 3)),
    )


class ViewSampler:
    """Training view ids, reshuffled at the start of every epoch."""

    __slots__ = ["_ids", "_rng", "_order", "_pos"]

    def __init__(self, ids: np.ndarray, rng: np.random.Generator) -> None:
        self._ids = np.asarray(ids)
        self._rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> int:
        if self._pos >= self._order.size:
            self._order = self._rng.permutation(self._ids)
            self._pos = 0
        view = int(self._order[self._pos])
        self._pos += 1
        return view
