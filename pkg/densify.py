"""
Adaptive density control restricted to the under-training group: accumulate
screen-space positional gradients, clone or split the over-threshold
primitives, prune transparent ones and reset opacities.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
import logging
import math
import typing

import numpy as np
import pandas as pd
from scipy.special import logit

from errors import ModelIOError, ShapeMismatchError
from model import GaussianSet, activate, quaternion_to_rotation, volume

if typing.TYPE_CHECKING:
    from typing import *

    from config import TrainConfig
    from grouping import GroupPartition, ImportanceState
    from optim import AdamState
    from render import GradientBuffer


logger = logging.getLogger(__name__)

SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6
RESET_OPACITY = 0.01


@dataclass
class Remap:
    """Row correspondence after a structural change.

    New rows are `kept` old rows in order, followed by one row per entry of
    `born_parents` (the old row each new primitive was derived from).
    """

    kept: np.ndarray
    born_parents: np.ndarray

    @property
    def count(self) -> int:
        return self.kept.size + self.born_parents.size

    def apply(self, arr: np.ndarray, fill: Any = 0) -> np.ndarray:
        """Kept rows, then `fill` for born rows."""
        born = np.full((self.born_parents.size,) + arr.shape[1:], fill, dtype=arr.dtype)
        return np.concatenate([arr[self.kept], born])

    def inherit(self, arr: np.ndarray) -> np.ndarray:
        """Kept rows, then a copy of each born row's parent."""
        return np.concatenate([arr[self.kept], arr[self.born_parents]])


@dataclass
class DensifyState:
    grad_accum: np.ndarray    # (N,) sum of screen-space gradient norms
    denom: np.ndarray         # (N,) views in which the row was visible
    grad3d_accum: np.ndarray  # (N, 3) sum of world-space mean gradients, for the clone nudge

    @classmethod
    def zeros(cls, n: int) -> DensifyState:
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros((n, 3)))

    @property
    def count(self) -> int:
        return self.grad_accum.shape[0]

    def average(self) -> np.ndarray:
        return np.divide(self.grad_accum, self.denom, out=np.zeros_like(self.grad_accum), where=self.denom > 0)

    def remap(self, remap: Remap) -> DensifyState:
        return DensifyState(remap.apply(self.grad_accum), remap.apply(self.denom), remap.apply(self.grad3d_accum))


def accumulate(state: DensifyState, grads: GradientBuffer, visible: np.ndarray, scale: float = 1.0) -> DensifyState:
    """Add |dL/d mean2d| (times `scale`) for the visible rows and count the view."""
    if visible.shape != (state.count,):
        raise ShapeMismatchError(f"visible mask {visible.shape} vs {state.count} rows")
    rows = np.flatnonzero(visible)
    state.grad_accum[rows] += np.linalg.norm(grads.d_means2d[rows], axis=1) * scale
    state.denom[rows] += 1
    state.grad3d_accum[rows] += grads.d_mean3d[rows]
    return state


@dataclass
class DensifyEvent:
    iteration: int
    count_before: int
    count_after: int
    cloned: int
    split: int
    pruned: int
    population_opacity: float
    population_volume: float
    contributor_opacity: float
    contributor_volume: float


@dataclass
class ContributorLog:
    """Opacity/volume of every primitive that triggered densification, plus one event per call."""

    iterations: List[np.ndarray] = field(default_factory=list)
    opacities: List[np.ndarray] = field(default_factory=list)
    volumes: List[np.ndarray] = field(default_factory=list)
    populations: List[Tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    events: List[DensifyEvent] = field(default_factory=list)
    keep_population: bool = True

    def record(self, event: DensifyEvent, contrib_opacity: np.ndarray, contrib_volume: np.ndarray,
               opacity: np.ndarray, vol: np.ndarray) -> None:
        self.events.append(event)
        self.iterations.append(np.full(contrib_opacity.size, event.iteration, dtype=np.int64))
        self.opacities.append(contrib_opacity)
        self.volumes.append(contrib_volume)
        if self.keep_population:
            self.populations.append((event.iteration, opacity, vol))

    def to_frame(self) -> pd.DataFrame:
        if not self.iterations:
            return pd.DataFrame(columns=["iteration", "opacity", "volume"])
        return pd.DataFrame({
            "iteration": np.concatenate(self.iterations),
            "opacity": np.concatenate(self.opacities),
            "volume": np.concatenate(self.volumes),
        })

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.events], columns=list(DensifyEvent.__dataclass_fields__))

    def save(self, path: Union[str, Path]) -> None:
        try:
            self.to_frame().to_csv(path, index=False)
        except OSError as exc:
            raise ModelIOError(path, f"cannot write contributor log ({exc.strerror})") from exc


@dataclass
class DensifyResult:
    gaussians: GaussianSet
    state: DensifyState
    adam: AdamState
    partition: GroupPartition
    importance: Optional[ImportanceState]
    remap: Remap
    event: DensifyEvent


def _check_parallel(gaussians: GaussianSet, state: DensifyState, adam: AdamState, partition: GroupPartition,
                    importance: Optional[ImportanceState]) -> None:
    lengths = {
        "gaussians": gaussians.count, "densify": state.count, "adam": adam.count, "partition": partition.count,
    }
    if importance is not None:
        lengths["importance"] = importance.blend_weight_accum.shape[0]
    if len(set(lengths.values())) != 1:
        raise ShapeMismatchError(f"state arrays are not parallel: {lengths}")


def _mean_or_nan(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else math.nan


def _split_offsets(gaussians: GaussianSet, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Samples from each parent's Gaussian: R diag(s) z, z ~ N(0, I); shape (rows * children, 3)."""
    parents = np.repeat(rows, SPLIT_CHILDREN)
    z = rng.standard_normal((parents.size, 3)) * np.exp(gaussians.log_scales[parents])
    rot = quaternion_to_rotation(gaussians.rotations[parents])
    return np.einsum("nij,nj->ni", rot, z)


def densify_and_prune(
    gaussians: GaussianSet,
    state: DensifyState,
    adam: AdamState,
    partition: GroupPartition,
    cfg: TrainConfig,
    iteration: int,
    extent: float,
    importance: Optional[ImportanceState] = None,
    log: Optional[ContributorLog] = None,
) -> DensifyResult:
    """Clone / split under-training rows over the gradient threshold, then prune transparent ones."""
    _check_parallel(gaussians, state, adam, partition, importance)
    n = gaussians.count
    under = partition.mask
    opacity = activate(gaussians).opacities
    vol = volume(gaussians.log_scales)
    max_scale = np.exp(gaussians.log_scales.max(axis=1)) if n else np.zeros(0)

    selected = under & (state.average() > cfg.grad_threshold)
    small = max_scale <= cfg.percent_dense * extent
    clone_rows = np.flatnonzero(selected & small)
    split_rows = np.flatnonzero(selected & ~small)
    prune = under & (opacity < cfg.min_opacity)
    prune[split_rows] = False
    removed = prune.copy()
    removed[split_rows] = True

    # clones: nudged against the accumulated positional gradient
    clones = gaussians.take(clone_rows)
    direction = -state.grad3d_accum[clone_rows]
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    direction = np.divide(direction, norms, out=np.zeros_like(direction), where=norms > 0)
    clones.means += cfg.clone_nudge * max_scale[clone_rows, None] * direction

    rng = np.random.default_rng([cfg.seed, iteration])
    children = gaussians.take(np.repeat(split_rows, SPLIT_CHILDREN))
    children.means += _split_offsets(gaussians, split_rows, rng)
    children.log_scales -= math.log(SPLIT_SCALE_DIVISOR)

    remap = Remap(
        kept=np.flatnonzero(~removed),
        born_parents=np.concatenate([clone_rows, np.repeat(split_rows, SPLIT_CHILDREN)]),
    )
    new_set = gaussians.take(remap.kept).concat(clones).concat(children)

    event = DensifyEvent(
        iteration=iteration, count_before=n, count_after=new_set.count,
        cloned=clone_rows.size, split=split_rows.size, pruned=int(prune.sum()),
        population_opacity=_mean_or_nan(opacity), population_volume=_mean_or_nan(vol),
        contributor_opacity=_mean_or_nan(opacity[selected]), contributor_volume=_mean_or_nan(vol[selected]),
    )
    if log is not None:
        log.record(event, opacity[selected], vol[selected], opacity, vol)
    logger.info(
        "iteration %d: %d -> %d primitives (clone %d, split %d, prune %d)",
        iteration, n, new_set.count, event.cloned, event.split, event.pruned,
    )

    return DensifyResult(
        gaussians=new_set,
        state=DensifyState.zeros(new_set.count),
        adam=adam.remap(remap),
        partition=partition.remap(remap),
        importance=importance.remap(remap) if importance is not None else None,
        remap=remap,
        event=event,
    )


def reset_opacity(gaussians: GaussianSet, partition: GroupPartition, value: float = RESET_OPACITY) -> GaussianSet:
    """Clamp under-training opacities down to `value`; cached rows are left alone."""
    rows = partition.under_training
    gaussians.opacity_logits[rows] = np.minimum(gaussians.opacity_logits[rows], logit(value))
    return gaussians
