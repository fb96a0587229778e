"""
Photometric loss, image-quality metrics and per-iteration run records.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
import logging
import math
import typing

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from errors import ModelIOError, ShapeMismatchError

if typing.TYPE_CHECKING:
    from typing import *


logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # window radius 5 -> 11x11
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _window(image: np.ndarray) -> np.ndarray:
    # zero padding; the kernel is symmetric, so this filter is its own adjoint
    return gaussian_filter(image, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0.0), mode="constant", truncate=SSIM_TRUNCATE)


def _check_pair(image: np.ndarray, target: np.ndarray) -> None:
    if image.shape != target.shape or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"image {image.shape} vs target {target.shape}")


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> Dict[str, np.ndarray]:
    mu_x, mu_y = _window(x), _window(y)
    m2x, m2y, mxy = _window(x * x), _window(y * y), _window(x * y)
    var_x, var_y = m2x - mu_x * mu_x, m2y - mu_y * mu_y
    cov_xy = mxy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov_xy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return {"mu_x": mu_x, "mu_y": mu_y, "a1": a1, "a2": a2, "b1": b1, "b2": b2, "map": (a1 * a2) / (b1 * b2)}


def ssim(image: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over pixels and channels (Gaussian window, sigma 1.5)."""
    _check_pair(image, target)
    return float(_ssim_terms(image, target)["map"].mean())


def ssim_grad(image: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """SSIM and its gradient w.r.t. `image`."""
    _check_pair(image, target)
    t = _ssim_terms(image, target)
    s, a1, a2, b1, b2 = t["map"], t["a1"], t["a2"], t["b1"], t["b2"]
    mu_x, mu_y = t["mu_x"], t["mu_y"]
    b1b2 = b1 * b2

    d_mu = 2.0 * mu_y * (a2 - a1) / b1b2 + 2.0 * mu_x * s * (1.0 / b2 - 1.0 / b1)
    d_m2x = -s / b2
    d_mxy = 2.0 * a1 / b1b2

    grad = _window(d_mu) + 2.0 * image * _window(d_m2x) + target * _window(d_mxy)
    return float(s.mean()), grad / s.size


def psnr(image: np.ndarray, target: np.ndarray) -> float:
    _check_pair(image, target)
    mse = float(np.mean((np.clip(image, 0.0, 1.0) - np.clip(target, 0.0, 1.0)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def photometric_loss(image: np.ndarray, target: np.ndarray, lambda_dssim: float = 0.2) -> Tuple[float, np.ndarray]:
    """(1 - lambda) * L1 + lambda * (1 - SSIM), with dL/d(image)."""
    _check_pair(image, target)
    diff = image - target
    l1 = float(np.abs(diff).mean())
    d_l1 = np.sign(diff) / diff.size
    if lambda_dssim == 0.0:
        return l1, d_l1
    value, d_ssim = ssim_grad(image, target)
    loss = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - value)
    return loss, (1.0 - lambda_dssim) * d_l1 - lambda_dssim * d_ssim


@dataclass
class IterationRecord:
    iteration: int
    wall_ms: float
    forward_ms: float
    blended_ops: int
    count: int
    under_training: int
    hits: int
    loss: float
    rss_mb: float
    size_mb: float
    psnr: float = math.nan
    ssim: float = math.nan


class RunMetrics:
    """Per-iteration records of one training run."""

    __slots__ = ["records"]

    def __init__(self) -> None:
        self.records: List[IterationRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, rec: IterationRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError(f"iteration {rec.iteration} after {self.records[-1].iteration}")
        if min(rec.blended_ops, rec.count, rec.under_training, rec.hits) < 0:
            raise ValueError(f"negative count in {rec}")
        self.records.append(rec)

    @property
    def total_blended_ops(self) -> int:
        return int(sum(r.blended_ops for r in self.records))

    @property
    def total_wall_ms(self) -> float:
        return float(sum(r.wall_ms for r in self.records))

    @property
    def total_forward_ms(self) -> float:
        return float(sum(r.forward_ms for r in self.records))

    def to_frame(self) -> pd.DataFrame:
        columns = [f.name for f in fields(IterationRecord)]
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)

    def save(self, path: Union[str, Path]) -> None:
        try:
            self.to_frame().to_csv(path, index=False)
        except OSError as exc:
            raise ModelIOError(path, f"cannot write metrics ({exc.strerror})") from exc
