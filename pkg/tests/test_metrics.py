import math

import numpy as np
import pandas as pd
import pytest

from errors import ShapeMismatchError
from metrics import IterationRecord, RunMetrics, photometric_loss, psnr, ssim, ssim_grad


def _record(iteration, **kwargs):
    values = dict(wall_ms=1.0, forward_ms=0.5, blended_ops=10, count=5, under_training=3, hits=2,
                  loss=0.1, rss_mb=100.0, size_mb=0.01)
    values.update(kwargs)
    return IterationRecord(iteration=iteration, **values)


def test_ssim_identity_and_symmetry(rng):
    x = rng.uniform(0, 1, (20, 24, 3))
    y = rng.uniform(0, 1, (20, 24, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    assert ssim(x, y) < 0.5


def test_ssim_grad_matches_finite_differences(rng):
    x = rng.uniform(0.2, 0.8, (12, 12, 3))
    y = rng.uniform(0.2, 0.8, (12, 12, 3))
    value, grad = ssim_grad(x, y)
    assert value == pytest.approx(ssim(x, y))
    h = 1e-6
    for idx in [(0, 0, 0), (5, 6, 1), (11, 3, 2), (7, 11, 0)]:
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (ssim(plus, y) - ssim(minus, y)) / (2 * h)
        assert grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_photometric_loss_gradient(rng):
    x = rng.uniform(0, 1, (10, 10, 3))
    y = rng.uniform(0, 1, (10, 10, 3))
    loss, grad = photometric_loss(x, y, lambda_dssim=0.2)
    assert loss == pytest.approx(0.8 * np.abs(x - y).mean() + 0.2 * (1.0 - ssim(x, y)))
    h = 1e-6
    checked = 0
    for idx in zip(*np.nonzero(np.abs(x - y) > 1e-3)):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (photometric_loss(plus, y)[0] - photometric_loss(minus, y)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-9)
        checked += 1
        if checked == 6:
            break


def test_pure_l1_loss():
    x = np.full((4, 4, 3), 0.5)
    y = np.full((4, 4, 3), 0.25)
    loss, grad = photometric_loss(x, y, lambda_dssim=0.0)
    assert loss == pytest.approx(0.25)
    np.testing.assert_allclose(grad, 1.0 / x.size)


def test_psnr():
    x = np.zeros((8, 8, 3))
    assert psnr(x, x) == math.inf
    assert psnr(x, np.full_like(x, 0.1)) == pytest.approx(20.0)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ShapeMismatchError):
        photometric_loss(np.zeros((4, 4)), np.zeros((4, 4)))


def test_run_metrics_rejects_out_of_order_and_negative_counts():
    metrics = RunMetrics()
    metrics.record(_record(0))
    with pytest.raises(ValueError):
        metrics.record(_record(0))
    with pytest.raises(ValueError):
        metrics.record(_record(1, blended_ops=-1))
    assert len(metrics) == 1


def test_run_metrics_totals_and_csv(tmp_path):
    metrics = RunMetrics()
    for it in range(3):
        metrics.record(_record(it, blended_ops=10 * (it + 1), wall_ms=2.0))
    assert metrics.total_blended_ops == 60
    assert metrics.total_wall_ms == pytest.approx(6.0)
    assert metrics.total_forward_ms == pytest.approx(1.5)
    metrics.save(tmp_path / "metrics.csv")
    frame = pd.read_csv(tmp_path / "metrics.csv")
    assert list(frame["blended_ops"]) == [10, 20, 30]
    assert "psnr" in frame.columns and frame["psnr"].isna().all()
