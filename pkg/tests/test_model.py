import math

import numpy as np
import pytest

from errors import ModelIOError, NonFiniteParameterError, ShapeMismatchError
from model import (
    Camera, GaussianSet, activate, build_covariance, build_covariances, deactivate, load_model, load_ply,
    memory_footprint_mb, model_size_mb, random_rotations, save_model, save_ply, scene_extent, volume,
)

from conftest import make_set


def test_activate_examples():
    g = GaussianSet(np.zeros((3, 3)), np.zeros((3, 3)), np.tile([2.0, 0, 0, 0], (3, 1)), [0.0, 4.0, -4.0], np.zeros((3, 3)))
    act = activate(g)
    assert act.opacities[0] == 0.5
    assert act.opacities[1] == pytest.approx(1.0 / (1.0 + math.exp(-4.0)), abs=1e-15)
    assert act.opacities[1] == pytest.approx(0.98201379, abs=1e-8)
    np.testing.assert_array_equal(act.scales, np.ones((3, 3)))
    np.testing.assert_allclose(np.linalg.norm(act.rotations, axis=1), 1.0)


def test_activate_reports_non_finite_index():
    g = make_set(np.zeros((4, 3)))
    g.log_scales[2, 1] = np.nan
    with pytest.raises(NonFiniteParameterError) as info:
        activate(g)
    assert info.value.index == 2
    assert info.value.name == "log_scales"


def test_activate_subset_reports_global_row():
    g = make_set(np.zeros((5, 3)), opacities=[0.1, 0.2, 0.3, 0.4, 0.5])
    np.testing.assert_allclose(activate(g, np.array([1, 4])).opacities, [0.2, 0.5])
    g.rotations[3] = 0.0
    activate(g, np.array([0, 2]))
    with pytest.raises(NonFiniteParameterError) as info:
        activate(g, np.array([1, 3]))
    assert (info.value.name, info.value.index) == ("rotations", 3)
    assert activate(GaussianSet.empty()).opacities.shape == (0,)
    assert activate(g, np.zeros(0, dtype=np.int64)).rotations.shape == (0, 4)


def test_deactivate_round_trip(rng):
    opacity = rng.uniform(1e-6, 1 - 1e-6, 1000)
    scale = np.exp(rng.uniform(-5, 2, (1000, 3)))
    logits, log_scales = deactivate(opacity, scale)
    act = activate(GaussianSet(np.zeros((1000, 3)), log_scales, np.tile([1.0, 0, 0, 0], (1000, 1)), logits, np.zeros((1000, 3))))
    np.testing.assert_allclose(act.opacities, opacity, rtol=0, atol=1e-12)
    np.testing.assert_allclose(act.scales, scale, rtol=1e-12)


def test_build_covariance_examples():
    np.testing.assert_allclose(build_covariance([0, 0, 0], [1, 0, 0, 0]), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(build_covariance([math.log(2), 0, 0], [1, 0, 0, 0]), np.diag([4.0, 1.0, 1.0]), atol=1e-12)
    half = math.sqrt(0.5)
    np.testing.assert_allclose(
        build_covariance([math.log(2), 0, 0], [half, 0, 0, half]), np.diag([1.0, 4.0, 1.0]), atol=1e-12,
    )


def test_build_covariance_rejects_zero_quaternion():
    with pytest.raises(ValueError):
        build_covariance([0, 0, 0], [0, 0, 0, 0])


def test_covariances_symmetric_psd(rng):
    n = 200_000
    cov = build_covariances(rng.uniform(-6, 2, (n, 3)), rng.normal(size=(n, 4)))
    np.testing.assert_array_equal(cov, np.swapaxes(cov, 1, 2))
    assert np.linalg.eigvalsh(cov).min() >= -1e-10


def test_volume():
    assert volume([0.0, 0.0, 0.0]) == 1.0
    assert volume([math.log(2), math.log(3), 0.0]) == pytest.approx(6.0, rel=1e-14)


def test_volume_matches_exp_sum_and_ignores_rotation(rng):
    log_scales = rng.normal(size=(50, 3))
    np.testing.assert_allclose(volume(log_scales), np.exp(log_scales.sum(axis=1)), rtol=1e-12)
    a = make_set(np.zeros((50, 3)), log_scales=log_scales, rotations=random_rotations(50, rng))
    b = make_set(np.zeros((50, 3)), log_scales=log_scales, rotations=random_rotations(50, rng))
    np.testing.assert_array_equal(volume(a.log_scales), volume(b.log_scales))


def test_parallel_lengths_enforced():
    with pytest.raises(ShapeMismatchError):
        GaussianSet(np.zeros((3, 3)), np.zeros((2, 3)), np.zeros((3, 4)), np.zeros(3), np.zeros((3, 3)))


def test_take_and_concat(rng):
    g = make_set(rng.normal(size=(5, 3)))
    both = g.take([4, 0]).concat(g.take([1]))
    assert both.count == 3
    np.testing.assert_array_equal(both.means, g.means[[4, 0, 1]])


def test_camera_look_at_centres_target():
    cam = Camera.look_at([0.0, -3.0, 0.5], [0.0, 0.0, 0.5], [0.0, 0.0, 1.0], 64, 48, 50.0)
    p = cam.rotation @ np.array([0.0, 0.0, 0.5]) + cam.translation
    assert p[2] == pytest.approx(3.0)
    assert cam.fx * p[0] / p[2] + cam.cx == pytest.approx((64 - 1) / 2)
    np.testing.assert_allclose(-cam.rotation.T @ cam.translation, [0.0, -3.0, 0.5], atol=1e-12)
    # image "down" is world -z
    below = cam.rotation @ np.array([0.0, 0.0, 0.0]) + cam.translation
    assert below[1] > 0


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(fx=0.0, fy=1.0, cx=0, cy=0, width=4, height=4)
    with pytest.raises(ValueError):
        Camera(fx=1.0, fy=1.0, cx=0, cy=0, width=0, height=4)


def test_native_model_is_lossless_and_deterministic(tmp_path, random_set):
    g = random_set(30)
    save_model(g, tmp_path / "a.npy")
    save_model(g, tmp_path / "b.npy")
    assert (tmp_path / "a.npy").read_bytes() == (tmp_path / "b.npy").read_bytes()
    back = load_model(tmp_path / "a.npy")
    for name, arr in g.params().items():
        np.testing.assert_array_equal(getattr(back, name), arr)


def test_ply_round_trip(tmp_path, random_set):
    g = random_set(25)
    g.colors = np.clip(g.colors, 0, 1)
    save_ply(g, tmp_path / "m.ply")
    back = load_ply(tmp_path / "m.ply")
    for name, arr in g.params().items():
        np.testing.assert_allclose(getattr(back, name), arr, rtol=0, atol=1e-6)


def test_ply_property_names(tmp_path, random_set):
    from plyfile import PlyData

    save_ply(random_set(3), tmp_path / "m.ply")
    names = PlyData.read(str(tmp_path / "m.ply"))["vertex"].data.dtype.names
    assert names[:4] == ("x", "y", "z", "f_dc_0")
    assert "opacity" in names and "scale_2" in names and "rot_3" in names


def test_io_errors_carry_path(tmp_path):
    with pytest.raises(ModelIOError) as info:
        load_ply(tmp_path / "missing.ply")
    assert "missing.ply" in str(info.value)
    with pytest.raises(ModelIOError):
        load_model(tmp_path / "missing.npy")


def test_sizes(random_set):
    g = random_set(100)
    assert model_size_mb(g) == pytest.approx(100 * 14 * 4 / (1024 * 1024))
    assert memory_footprint_mb(g) > 0


def test_scene_extent():
    means = np.array([[-1.0, 0, 0], [1.0, 0, 0], [0, 0.5, 0]])
    assert scene_extent(means) == pytest.approx(math.sqrt(1.0 + 0.0625))
    assert scene_extent(np.zeros((0, 3))) == 1.0
