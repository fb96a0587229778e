"""
Training configuration: a dataclass loaded from / snapshotted to YAML.

Iteration constants left unset are derived from the full-length schedule
scaled by `schedule_scale`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
import logging
import typing

import yaml

from errors import ConfigError
from grouping import SCOPES, STRATEGIES, Schedule

if typing.TYPE_CHECKING:
    from typing import *


logger = logging.getLogger(__name__)

# full-length schedule, scaled by schedule_scale unless set explicitly
FULL_SCHEDULE = {
    "iterations": 30_000,
    "group_interval": 500,
    "densify_from": 500,
    "densify_until": 15_000,
    "merge_densify_at": 14_500,
    "merge_optimize_at": 29_000,
    "reset_interval": 3_000,
}


@dataclass
class TrainConfig:
    # schedule
    iterations: Optional[int] = None
    schedule_scale: float = 0.1
    group_interval: Optional[int] = None
    activate_at: Optional[int] = None
    merge_densify_at: Optional[int] = None
    merge_optimize_at: Optional[int] = None
    densify_from: Optional[int] = None
    densify_until: Optional[int] = None
    densify_interval: int = 50
    reset_interval: Optional[int] = None

    # group training
    strategy: str = "none"
    utr: float = 0.6
    scope: str = "full"
    cyclic_resample: bool = True
    global_densify: bool = True
    global_optimize: bool = True

    # density control
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    percent_dense: float = 0.01
    clone_nudge: float = 0.5

    # rendering and loss
    t_saturation: float = 1e-4
    lambda_dssim: float = 0.2
    background: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])

    # synthetic scene
    scene_path: Optional[str] = None
    gt_count: int = 800
    num_views: int = 24
    resolution: int = 128
    test_every: int = 8
    init_count: int = 100

    # run
    seed: int = 0
    out_dir: Optional[str] = None
    eval_interval: int = 500
    save_test_renders: bool = True
    log_contributors: bool = True
    debug_checks: bool = False
    quiet: bool = False

    def resolved(self) -> TrainConfig:
        """Copy with every unset iteration constant filled in."""
        values = {}
        for name, full in FULL_SCHEDULE.items():
            current = getattr(self, name)
            values[name] = current if current is not None else int(round(full * self.schedule_scale))
        if self.activate_at is None:
            values["activate_at"] = values["densify_from"] + values["group_interval"]
        return replace(self, **values)

    def validate(self) -> TrainConfig:
        cfg = self.resolved()
        _require(cfg.iterations >= 0, "iterations", "must be >= 0")
        _require(cfg.schedule_scale > 0, "schedule_scale", "must be > 0")
        for name in ("group_interval", "densify_interval", "reset_interval", "eval_interval", "test_every"):
            _require(getattr(cfg, name) >= 1, name, "must be >= 1")
        for name in ("densify_from", "densify_until", "activate_at", "merge_densify_at", "merge_optimize_at"):
            _require(getattr(cfg, name) >= 0, name, "must be >= 0")
        _require(cfg.densify_from <= cfg.densify_until, "densify_from", "must not exceed densify_until")
        _require(cfg.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        _require(cfg.scope in SCOPES, "scope", f"must be one of {SCOPES}")
        _require(0.0 < cfg.utr <= 1.0, "utr", "must lie in (0, 1]")
        if cfg.strategy != "none" and cfg.iterations > 0:
            _require(
                cfg.activate_at < cfg.merge_densify_at < cfg.merge_optimize_at <= cfg.iterations,
                "merge_optimize_at", "expected activate_at < merge_densify_at < merge_optimize_at <= iterations",
            )
            _require(cfg.merge_densify_at <= cfg.densify_until, "merge_densify_at", "must not exceed densify_until")
        _require(cfg.grad_threshold > 0, "grad_threshold", "must be > 0")
        _require(0.0 <= cfg.min_opacity < 1.0, "min_opacity", "must lie in [0, 1)")
        _require(cfg.percent_dense > 0, "percent_dense", "must be > 0")
        _require(cfg.clone_nudge >= 0, "clone_nudge", "must be >= 0")
        _require(0.0 <= cfg.t_saturation < 1.0, "t_saturation", "must lie in [0, 1)")
        _require(0.0 <= cfg.lambda_dssim <= 1.0, "lambda_dssim", "must lie in [0, 1]")
        _require(len(cfg.background) == 3 and all(0.0 <= c <= 1.0 for c in cfg.background),
                 "background", "must be three values in [0, 1]")
        _require(cfg.gt_count >= 1, "gt_count", "must be >= 1")
        _require(cfg.num_views >= 2, "num_views", "must be >= 2")
        _require(cfg.resolution >= 1, "resolution", "must be >= 1")
        _require(cfg.init_count >= 1, "init_count", "must be >= 1")
        _require(cfg.seed >= 0, "seed", "must be >= 0")
        return cfg

    def schedule(self) -> Schedule:
        cfg = self.resolved()
        return Schedule(
            group_interval=cfg.group_interval,
            activate_at=cfg.activate_at,
            merge_densify_at=cfg.merge_densify_at,
            merge_optimize_at=cfg.merge_optimize_at,
            densify_end=cfg.densify_until,
            total=cfg.iterations,
            scope=cfg.scope,
            cyclic_resample=cfg.cyclic_resample,
            global_densify=cfg.global_densify,
            global_optimize=cfg.global_optimize,
        )

    @property
    def grouped(self) -> bool:
        return self.strategy != "none"


def _require(condition: bool, name: str, message: str) -> None:
    if not condition:
        raise ConfigError(name, message)


FIELD_NAMES = tuple(f.name for f in fields(TrainConfig))


def config_from_dict(values: Mapping[str, Any]) -> TrainConfig:
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from exc
    if isinstance(cfg.background, tuple):
        cfg.background = list(cfg.background)
    return cfg


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """YAML file (optional) with overrides on top, validated and resolved."""
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as handle:
                loaded = yaml.safe_load(handle)
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"invalid YAML ({exc})") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(str(path), "top level must be a mapping")
        values.update(loaded or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(values).validate()


def save_config(cfg: TrainConfig, path: Union[str, Path]) -> None:
    try:
        with open(path, "w") as handle:
            yaml.safe_dump(asdict(cfg), handle, sort_keys=True)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot write config ({exc.strerror})") from exc
