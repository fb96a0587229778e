import math

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from config import TrainConfig
from densify import (
    SPLIT_SCALE_DIVISOR, ContributorLog, DensifyState, Remap, accumulate, densify_and_prune, reset_opacity,
)
from errors import ShapeMismatchError
from grouping import STRATEGIES, GroupPartition, ImportanceState, merge, resample
from model import PARAM_NAMES
from optim import AdamState
from render import GradientBuffer

from conftest import make_set

SMALL = 0.005
LARGE = 0.5


def _cfg(**kwargs):
    values = dict(grad_threshold=2e-4, min_opacity=0.005, percent_dense=0.01, clone_nudge=0.5, seed=7)
    values.update(kwargs)
    return TrainConfig(**values)


def _hot_state(n, rows, value=1e-2):
    state = DensifyState.zeros(n)
    state.grad_accum[rows] = value
    state.denom[rows] = 1
    return state


def _run(g, state, partition=None, importance=None, log=None, **cfg):
    n = g.count
    partition = partition if partition is not None else GroupPartition.full(n)
    return densify_and_prune(g, state, AdamState.zeros(n), partition, _cfg(**cfg), iteration=100, extent=1.0,
                             importance=importance, log=log)


def test_accumulate_zero_gradients_counts_view():
    state = DensifyState.zeros(3)
    visible = np.array([True, False, True])
    accumulate(state, GradientBuffer.zeros(3), visible)
    assert not state.grad_accum.any()
    assert state.denom.tolist() == [1, 0, 1]


def test_accumulate_norm_and_average():
    state = DensifyState.zeros(2)
    first, second = GradientBuffer.zeros(2), GradientBuffer.zeros(2)
    first.d_means2d[0] = [3.0, 4.0]
    second.d_means2d[0] = [0.0, 1.0]
    visible = np.array([True, False])
    accumulate(state, first, visible)
    assert state.grad_accum[0] == pytest.approx(5.0)
    accumulate(state, second, visible)
    np.testing.assert_allclose(state.average(), [3.0, 0.0])


def test_accumulate_scale_and_mask_check():
    state = DensifyState.zeros(1)
    grads = GradientBuffer.zeros(1)
    grads.d_means2d[0] = [3.0, 4.0]
    accumulate(state, grads, np.ones(1, dtype=bool), scale=0.5)
    assert state.grad_accum[0] == pytest.approx(2.5)
    with pytest.raises(ShapeMismatchError):
        accumulate(state, grads, np.ones(2, dtype=bool))


def test_quiet_state_leaves_set_unchanged():
    g = make_set(np.zeros((4, 3)), opacities=[0.5, 0.2, 0.9, 0.01])
    state = _hot_state(4, [0, 1, 2, 3], value=1e-5)
    result = _run(g, state)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(result.gaussians, name), getattr(g, name))
    assert not result.state.grad_accum.any() and not result.state.denom.any()
    assert result.event.count_after == 4


def test_small_hot_primitive_is_cloned_against_the_gradient():
    g = make_set([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], log_scales=np.full((2, 3), math.log(SMALL)))
    state = _hot_state(2, [0])
    state.grad3d_accum[0] = [2.0, 0.0, 0.0]
    result = _run(g, state)
    assert result.gaussians.count == 3
    assert (result.event.cloned, result.event.split) == (1, 0)
    np.testing.assert_allclose(result.gaussians.means[2], [-0.5 * SMALL, 0.0, 0.0])
    np.testing.assert_array_equal(result.gaussians.means[:2], g.means)
    assert result.remap.born_parents.tolist() == [0]


def test_large_hot_primitive_is_split():
    g = make_set([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], log_scales=np.full((2, 3), math.log(LARGE)))
    result = _run(g, _hot_state(2, [1]))
    assert result.gaussians.count == 3
    assert (result.event.cloned, result.event.split) == (0, 1)
    np.testing.assert_array_equal(result.gaussians.means[0], g.means[0])
    np.testing.assert_allclose(np.exp(result.gaussians.log_scales[1:]), LARGE / SPLIT_SCALE_DIVISOR)
    assert result.remap.kept.tolist() == [0]
    assert result.remap.born_parents.tolist() == [1, 1]


def test_split_children_follow_the_parent_distribution():
    n = 5000
    scales = np.array([0.5, 0.2, 0.1])
    g = make_set(np.tile([0.3, -0.2, 1.0], (n, 1)), log_scales=np.tile(np.log(scales), (n, 1)))
    result = _run(g, _hot_state(n, np.arange(n)))
    children = result.gaussians.means
    assert children.shape == (2 * n, 3)
    offsets = children - [0.3, -0.2, 1.0]
    assert np.all(np.abs(offsets.mean(axis=0)) <= 4 * scales / math.sqrt(2 * n))
    np.testing.assert_allclose(offsets.std(axis=0), scales, rtol=0.05)


def test_split_is_seeded_by_iteration():
    g = make_set(np.zeros((3, 3)), log_scales=np.full((3, 3), math.log(LARGE)))
    a = _run(g, _hot_state(3, [0, 1, 2]))
    b = _run(g, _hot_state(3, [0, 1, 2]))
    np.testing.assert_array_equal(a.gaussians.means, b.gaussians.means)


def test_prune_only_touches_under_training_rows():
    g = make_set(np.zeros((4, 3)), opacities=[0.001, 0.001, 0.5, 0.5])
    partition = GroupPartition(np.array([0, 2]), 4)
    result = _run(g, DensifyState.zeros(4), partition=partition)
    assert result.event.pruned == 1
    assert result.remap.kept.tolist() == [1, 2, 3]
    assert result.partition.under_training.tolist() == [1]


def test_cached_hot_rows_are_not_densified():
    g = make_set(np.zeros((3, 3)), log_scales=np.full((3, 3), math.log(SMALL)))
    partition = GroupPartition(np.array([1]), 3)
    result = _run(g, _hot_state(3, [0, 2]), partition=partition)
    assert result.gaussians.count == 3
    assert result.event.cloned == 0


def test_born_rows_join_under_training_and_inherit_importance():
    g = make_set(np.zeros((3, 3)), log_scales=np.full((3, 3), math.log(SMALL)))
    partition = GroupPartition(np.array([0, 1]), 3)
    importance = ImportanceState(np.zeros(3), 0, np.array([0.1, 0.2, 0.3]))
    result = _run(g, _hot_state(3, [1]), partition=partition, importance=importance)
    assert result.partition.count == 4
    assert result.partition.under_training.tolist() == [0, 1, 3]
    np.testing.assert_allclose(result.importance.score, [0.1, 0.2, 0.3, 0.2])
    assert result.adam.count == 4 and result.state.count == 4


def test_inconsistent_lengths_abort():
    g = make_set(np.zeros((3, 3)))
    with pytest.raises(ShapeMismatchError):
        densify_and_prune(g, DensifyState.zeros(2), AdamState.zeros(3), GroupPartition.full(3), _cfg(), 0, 1.0)


def test_contributor_log_frames(tmp_path):
    g = make_set(np.zeros((3, 3)), log_scales=np.full((3, 3), math.log(SMALL)), opacities=[0.2, 0.4, 0.6])
    log = ContributorLog()
    _run(g, _hot_state(3, [1, 2]), log=log)
    frame = log.to_frame()
    np.testing.assert_allclose(frame["opacity"], [0.4, 0.6])
    assert set(frame["iteration"]) == {100}
    events = log.events_frame()
    assert events.loc[0, "contributor_opacity"] == pytest.approx(0.5)
    assert events.loc[0, "population_opacity"] == pytest.approx(0.4)
    log.save(tmp_path / "densify.csv")
    assert len(pd.read_csv(tmp_path / "densify.csv")) == 2
    assert ContributorLog().to_frame().empty


def test_reset_opacity_clamps_down_only():
    g = make_set(np.zeros((3, 3)), opacities=[0.9, 0.005, 0.9])
    cached_before = g.opacity_logits[2]
    reset_opacity(g, GroupPartition(np.array([0, 1]), 3))
    opacity = expit(g.opacity_logits)
    assert opacity[0] == pytest.approx(0.01)
    assert opacity[1] == pytest.approx(0.005)
    assert g.opacity_logits[2] == cached_before


def test_remap_helpers():
    remap = Remap(kept=np.array([2, 0]), born_parents=np.array([1]))
    assert remap.count == 3
    np.testing.assert_array_equal(remap.apply(np.array([10, 11, 12]), fill=-1), [12, 10, -1])
    np.testing.assert_array_equal(remap.inherit(np.array([10, 11, 12])), [12, 10, 11])


def _interleave(steps, seed):
    """Random densify / resample / merge / reset sequence; returns the number of densify calls."""
    rng = np.random.default_rng(seed)
    n = 40
    g = make_set(rng.uniform(-1.0, 1.0, (n, 3)), log_scales=np.log(rng.uniform(0.001, 0.1, (n, 3))),
                 opacities=rng.uniform(0.01, 0.99, n))
    adam = AdamState.zeros(n)
    for name in PARAM_NAMES:
        adam.m[name] = rng.normal(size=adam.m[name].shape)
        adam.v[name] = rng.random(adam.v[name].shape)
    state, importance, partition = DensifyState.zeros(n), ImportanceState.zeros(n), GroupPartition.full(n)
    densified = 0
    for it in range(1, steps + 1):
        op = rng.choice(["densify", "resample", "merge", "reset"], p=[0.4, 0.3, 0.1, 0.2])
        cached = partition.cached
        before = [arr[cached].copy() for arr in g.params().values()]
        before += [adam.m[name][cached].copy() for name in PARAM_NAMES] + [adam.step_counts[cached].copy()]
        rows = cached
        if op == "densify":
            state.grad_accum[:] = np.where(rng.random(g.count) < 0.2, 1e-2, 0.0)
            state.denom[:] = 1
            importance.blend_weight_accum[:] = rng.random(g.count)
            min_opacity = 0.6 if g.count > 300 else rng.uniform(0.005, 0.3)
            result = densify_and_prune(g, state, adam, partition, _cfg(min_opacity=min_opacity, seed=seed), it, 1.0, importance)
            assert np.isin(cached, result.remap.kept).all()
            rows = np.searchsorted(result.remap.kept, cached)
            assert partition.count == result.remap.kept.size + result.event.pruned + result.event.split
            g, state, adam = result.gaussians, result.state, result.adam
            partition, importance = result.partition, result.importance
            assert partition.mask[result.remap.kept.size:].all()
            densified += 1
        elif op == "resample":
            strategy = str(rng.choice(STRATEGIES[1:]))
            partition = resample(g, partition, strategy, rng.uniform(0.05, 1.0), [seed, it], importance, it)
        elif op == "merge":
            partition = merge(partition, it)
        else:
            reset_opacity(g, partition)

        after = [arr[rows] for arr in g.params().values()]
        after += [adam.m[name][rows] for name in PARAM_NAMES] + [adam.step_counts[rows]]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)
        lengths = {g.count, state.count, adam.count, partition.count,
                   importance.blend_weight_accum.shape[0], importance.score.shape[0]}
        assert len(lengths) == 1, (it, op, lengths)
    return densified


def test_state_stays_parallel_under_random_interleavings():
    assert _interleave(400, 11) > 100


@pytest.mark.slow
def test_state_stays_parallel_under_many_interleavings():
    assert _interleave(10_000, 12) > 3000
