"""
Adam over the raw parameter arrays, restricted to the rows of the active group.

Rows outside the mask are not read or written: parameters, moments and step
counters of cached primitives stay bitwise frozen until they are active again.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
import typing

import numpy as np

from errors import NonFiniteParameterError, ShapeMismatchError
from model import PARAM_NAMES, PARAM_WIDTHS, GaussianSet

if typing.TYPE_CHECKING:
    from typing import *

    from densify import Remap
    from render import GradientBuffer


logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-15

POSITION_LR_INIT = 1.6e-4
POSITION_LR_FINAL = 1.6e-6
DEFAULT_LRS = {
    "opacity_logits": 0.05,
    "log_scales": 5e-3,
    "rotations": 1e-3,
    "colors": 2.5e-3,
}


def _shape(name: str, n: int) -> Tuple[int, ...]:
    return (n,) if name == "opacity_logits" else (n, PARAM_WIDTHS[name])


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step_counts: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(
            m={name: np.zeros(_shape(name, n)) for name in PARAM_NAMES},
            v={name: np.zeros(_shape(name, n)) for name in PARAM_NAMES},
            step_counts=np.zeros(n, dtype=np.int64),
        )

    @property
    def count(self) -> int:
        return self.step_counts.shape[0]

    def copy(self) -> AdamState:
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step_counts=self.step_counts.copy(),
        )

    def remap(self, remap: Remap) -> AdamState:
        """Keep surviving rows; born rows start from zero moments and step count."""
        return AdamState(
            m={k: remap.apply(a) for k, a in self.m.items()},
            v={k: remap.apply(a) for k, a in self.v.items()},
            step_counts=remap.apply(self.step_counts),
        )


def position_lr(iteration: int, total_iterations: int, extent: float,
                lr_init: float = POSITION_LR_INIT, lr_final: float = POSITION_LR_FINAL) -> float:
    """Log-linear decay of the means learning rate, scaled by the scene extent."""
    if total_iterations <= 0:
        return lr_init * extent
    t = min(max(iteration / total_iterations, 0.0), 1.0)
    return math.exp((1.0 - t) * math.log(lr_init) + t * math.log(lr_final)) * extent


def learning_rates(iteration: int, total_iterations: int, extent: float) -> Dict[str, float]:
    lrs = dict(DEFAULT_LRS)
    lrs["means"] = position_lr(iteration, total_iterations, extent)
    return lrs


def step(
    gaussians: GaussianSet,
    grads: Union[GradientBuffer, Mapping[str, np.ndarray]],
    state: AdamState,
    active_mask: np.ndarray,
    lrs: Mapping[str, float],
) -> Tuple[GaussianSet, AdamState]:
    """One Adam update of the active rows, in place.

    :param gaussians: raw parameters, updated in place
    :param grads: GradientBuffer or a mapping parameter name -> gradient array
    :param state: moments and per-row step counters, updated in place
    :param active_mask: boolean (N,), rows to update
    :param lrs: learning rate per parameter name
    :return: the same (gaussians, state) objects
    """
    n = gaussians.count
    if active_mask.shape != (n,) or state.count != n:
        raise ShapeMismatchError(f"mask {active_mask.shape}, state {state.count}, set {n}")
    raw = grads.raw() if hasattr(grads, "raw") else grads
    rows = np.flatnonzero(active_mask)
    if rows.size == 0:
        return gaussians, state

    for name in PARAM_NAMES:
        g = raw[name][rows]
        bad = ~np.isfinite(g.reshape(rows.size, -1)).all(axis=1)
        if bad.any():
            raise NonFiniteParameterError(f"grad:{name}", int(rows[np.flatnonzero(bad)[0]]))

    t = state.step_counts[rows] + 1
    state.step_counts[rows] = t
    bias1 = 1.0 - BETA1 ** t
    bias2 = 1.0 - BETA2 ** t

    for name in PARAM_NAMES:
        g = raw[name][rows]
        param, m, v = getattr(gaussians, name), state.m[name], state.v[name]
        m_rows = BETA1 * m[rows] + (1.0 - BETA1) * g
        v_rows = BETA2 * v[rows] + (1.0 - BETA2) * g * g
        m[rows], v[rows] = m_rows, v_rows
        b1 = bias1 if g.ndim == 1 else bias1[:, None]
        b2 = bias2 if g.ndim == 1 else bias2[:, None]
        param[rows] = param[rows] - lrs[name] * (m_rows / b1) / (np.sqrt(v_rows / b2) + EPSILON)

    q = gaussians.rotations[rows]
    gaussians.rotations[rows] = q / np.linalg.norm(q, axis=1, keepdims=True)
    gaussians.colors[rows] = np.clip(gaussians.colors[rows], 0.0, 1.0)
    return gaussians, state
