"""
Group training: split the primitives into an under-training group and a cached
group, resample the split on a schedule, and merge it back at the global
densification / optimisation points.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from itertools import permutations
from pathlib import Path
import logging
import math
import typing

import numpy as np
import pandas as pd

from errors import ModelIOError
from model import GaussianSet, activate, volume

if typing.TYPE_CHECKING:
    from typing import *

    from densify import Remap
    from render import RenderOutput


logger = logging.getLogger(__name__)

STRATEGIES = ("none", "random", "opacity", "volume", "volume_opacity", "importance")
SCOPES = ("full", "densify_only")
WEIGHT_FLOOR = 1e-12


class Action(str, Enum):
    NONE = "none"
    RESAMPLE = "resample"
    MERGE_DENSIFY = "merge_densify"
    MERGE_OPTIMIZE = "merge_optimize"


def under_training_size(utr: float, n: int) -> int:
    # guard against 0.7 * 10 == 7.000000000000001
    return min(n, math.ceil(utr * n - 1e-9))


@dataclass(frozen=True)
class GroupPartition:
    under_training: np.ndarray  # sorted row indices
    count: int
    created_at: int = 0
    strategy: str = "none"
    utr: float = 1.0

    def __post_init__(self) -> None:
        idx = np.asarray(self.under_training, dtype=np.int64)
        object.__setattr__(self, "under_training", idx)
        if idx.size and (idx[0] < 0 or idx[-1] >= self.count or np.any(np.diff(idx) <= 0)):
            raise ValueError("under_training must be sorted, unique and within [0, count)")

    @classmethod
    def full(cls, n: int, iteration: int = 0, strategy: str = "none", utr: float = 1.0) -> GroupPartition:
        return cls(np.arange(n, dtype=np.int64), n, iteration, strategy, utr)

    @classmethod
    def from_mask(cls, mask: np.ndarray, **kwargs: Any) -> GroupPartition:
        return cls(np.flatnonzero(mask), mask.shape[0], **kwargs)

    @property
    def cached(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def mask(self) -> np.ndarray:
        mask = np.zeros(self.count, dtype=bool)
        mask[self.under_training] = True
        return mask

    @property
    def is_merged(self) -> bool:
        return self.under_training.size == self.count

    def remap(self, remap: Remap) -> GroupPartition:
        """Follow a structural change; born rows join the under-training group."""
        mask = remap.apply(self.mask, fill=True)
        return GroupPartition.from_mask(mask, created_at=self.created_at, strategy=self.strategy, utr=self.utr)


@dataclass
class Schedule:
    group_interval: int
    activate_at: int
    merge_densify_at: int
    merge_optimize_at: int
    densify_end: int
    total: int
    scope: str = "full"
    cyclic_resample: bool = True
    global_densify: bool = True
    global_optimize: bool = True

    def validate(self) -> None:
        if self.group_interval < 1:
            raise ValueError(f"group_interval must be >= 1, got {self.group_interval}")
        if not self.activate_at < self.merge_densify_at < self.merge_optimize_at <= self.total:
            raise ValueError(
                "expected activate_at < merge_densify_at < merge_optimize_at <= total, got "
                f"{self.activate_at}, {self.merge_densify_at}, {self.merge_optimize_at}, {self.total}"
            )
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")


def tick(schedule: Schedule, iteration: int) -> Action:
    """Partition action due once `iteration` has densified; the new partition trains from the next iteration."""
    if iteration < schedule.activate_at:
        return Action.NONE
    if schedule.scope == "densify_only" and iteration >= schedule.densify_end:
        return Action.MERGE_OPTIMIZE if iteration == schedule.densify_end else Action.NONE
    if schedule.global_densify:
        if iteration == schedule.merge_densify_at:
            return Action.MERGE_DENSIFY
        if schedule.merge_densify_at < iteration <= schedule.densify_end:
            return Action.NONE
    if schedule.global_optimize:
        if iteration == schedule.merge_optimize_at:
            return Action.MERGE_OPTIMIZE
        if iteration > schedule.merge_optimize_at:
            return Action.NONE
    if schedule.cyclic_resample and (iteration - schedule.activate_at) % schedule.group_interval == 0:
        return Action.RESAMPLE
    return Action.NONE


@dataclass
class ImportanceState:
    blend_weight_accum: np.ndarray
    window: int = 0
    score: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.score is None:
            self.score = np.ones_like(self.blend_weight_accum)

    @classmethod
    def zeros(cls, n: int) -> ImportanceState:
        return cls(np.zeros(n))

    def remap(self, remap: Remap) -> ImportanceState:
        return ImportanceState(remap.apply(self.blend_weight_accum), self.window, remap.inherit(self.score))

    def close_window(self, partition: GroupPartition) -> None:
        """Turn the finished window into scores for the rows that were rendered in it."""
        if self.window > 0:
            rows = partition.under_training
            self.score[rows] = self.blend_weight_accum[rows] / self.window
        self.blend_weight_accum[:] = 0.0
        self.window = 0


def accumulate_importance(state: ImportanceState, output: RenderOutput) -> ImportanceState:
    state.blend_weight_accum += output.per_gaussian_weights
    state.window += 1
    return state


def sample_weights(gaussians: GaussianSet, strategy: str, importance: Optional[ImportanceState] = None) -> np.ndarray:
    if strategy in ("none", "random"):
        theta = np.ones(gaussians.count)
    elif strategy == "opacity":
        theta = activate(gaussians).opacities
    elif strategy == "volume":
        theta = volume(gaussians.log_scales)
    elif strategy == "volume_opacity":
        theta = activate(gaussians).opacities * volume(gaussians.log_scales)
    elif strategy == "importance":
        theta = importance.score if importance is not None else np.ones(gaussians.count)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return np.maximum(theta, WEIGHT_FLOOR)


def sampling_probabilities(weights: np.ndarray) -> np.ndarray:
    return weights / weights.sum()


def weighted_sample(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct indices by exponential keys u ** (1 / w); returned sorted."""
    u = rng.random(weights.shape[0])
    keys = np.log(u) / weights
    order = np.argsort(-keys, kind="stable")
    return np.sort(order[:k])


def resample(
    gaussians: GaussianSet,
    partition: Optional[GroupPartition],
    strategy: str,
    utr: float,
    rng_seed: Union[int, Sequence[int]],
    importance: Optional[ImportanceState] = None,
    iteration: int = 0,
) -> GroupPartition:
    """Merge-then-resample: draw a fresh under-training group of size ceil(utr * N).

    The previous partition only closes the importance window (its rows get new scores).
    """
    if not 0.0 < utr <= 1.0:
        raise ValueError(f"utr must lie in (0, 1], got {utr}")
    if importance is not None and partition is not None:
        importance.close_window(partition)
    n = gaussians.count
    k = under_training_size(utr, n)
    if k == n:
        return GroupPartition.full(n, iteration, strategy, utr)
    weights = sample_weights(gaussians, strategy, importance)
    rows = weighted_sample(weights, k, np.random.default_rng(rng_seed))
    return GroupPartition(rows, n, iteration, strategy, utr)


def merge(partition: GroupPartition, iteration: Optional[int] = None) -> GroupPartition:
    created = partition.created_at if iteration is None else iteration
    return GroupPartition.full(partition.count, created, partition.strategy, partition.utr)


def inclusion_probabilities_bruteforce(weights: Sequence[float], k: int) -> np.ndarray:
    """Exact inclusion probabilities of k successive weighted draws without replacement."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    probs = np.zeros(w.shape[0])
    for seq in permutations(range(w.shape[0]), k):
        p, remaining = 1.0, total
        for i in seq:
            p *= w[i] / remaining
            remaining -= w[i]
        probs[list(seq)] += p
    return probs


@dataclass
class PartitionEvent:
    iteration: int
    action: str
    strategy: str
    count: int
    under_training: int


class PartitionLog:
    __slots__ = ["events"]

    def __init__(self) -> None:
        self.events: List[PartitionEvent] = []

    def record(self, iteration: int, action: Action, partition: GroupPartition) -> None:
        event = PartitionEvent(iteration, action.value, partition.strategy, partition.count, partition.under_training.size)
        logger.info("%s at %d: %d / %d under training", event.action, iteration, event.under_training, event.count)
        self.events.append(event)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [asdict(e) for e in self.events],
            columns=["iteration", "action", "strategy", "count", "under_training"],
        )

    def save(self, path: Union[str, Path]) -> None:
        try:
            self.to_frame().to_csv(path, index=False)
        except OSError as exc:
            raise ModelIOError(path, f"cannot write partition log ({exc.strerror})") from exc
