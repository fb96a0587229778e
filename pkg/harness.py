"""
Training loop and command-line entry point.

    python harness.py train --strategy opacity --utr 0.6 --out runs/ops
    python harness.py compare --out runs/compare
    python harness.py prop2 --out runs/prop2
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
import argparse
import logging
import math
import sys
import typing

import numpy as np
from tqdm import tqdm

from config import FIELD_NAMES, TrainConfig, load_config, save_config
from densify import ContributorLog, DensifyState, accumulate, densify_and_prune, reset_opacity
from errors import SplatError, TrainingDivergedError
from grouping import Action, GroupPartition, ImportanceState, PartitionLog, accumulate_importance, merge, resample, tick
from metrics import IterationRecord, RunMetrics, photometric_loss, psnr, ssim
from model import GaussianSet, load_model, load_ply, model_size_mb, save_model, save_ply, scene_extent
from optim import AdamState, learning_rates, step
from render import render_backward, render_forward, render_image, save_png
from scene import SyntheticScene, ViewSampler, make_scene, orbit_cameras, random_init
from utils import Stopwatch, get_process_memory_usage_mb, log_execution_time, setup_logging

if typing.TYPE_CHECKING:
    from typing import *


logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    gaussians: GaussianSet
    metrics: RunMetrics
    partitions: PartitionLog
    contributors: ContributorLog
    adam: AdamState
    extent: float
    test_psnr: float
    test_ssim: float


def evaluate(gaussians: GaussianSet, scene: SyntheticScene) -> Tuple[float, float]:
    """Mean PSNR / SSIM over the held-out views, rendering the full set."""
    if scene.test_ids.size == 0:
        return math.nan, math.nan
    scores = []
    for view in scene.test_ids:
        image = render_image(gaussians, scene.cameras[view], scene.background)
        scores.append((psnr(image, scene.targets[view]), ssim(image, scene.targets[view])))
    values = np.asarray(scores)
    return float(values[:, 0].mean()), float(values[:, 1].mean())


def _check_cached_exclusion(iteration: int, cached: np.ndarray, hits: np.ndarray, grads: Dict[str, np.ndarray]) -> None:
    if cached.size == 0:
        return
    if np.any(hits[cached] != 0):
        raise AssertionError(f"iteration {iteration}: cached primitives were blended")
    for name, arr in grads.items():
        if np.any(arr[cached] != 0):
            raise AssertionError(f"iteration {iteration}: cached primitives received gradient in {name}")


def _snapshot(gaussians: GaussianSet, adam: AdamState, rows: np.ndarray) -> List[np.ndarray]:
    arrays = [arr[rows] for arr in gaussians.params().values()]
    arrays += [adam.m[k][rows] for k in sorted(adam.m)] + [adam.v[k][rows] for k in sorted(adam.v)]
    return arrays + [adam.step_counts[rows]]


def _check_frozen(iteration: int, before: List[np.ndarray], after: List[np.ndarray]) -> None:
    for a, b in zip(before, after):
        if a.tobytes() != b.tobytes():
            raise AssertionError(f"iteration {iteration}: cached parameters or moments changed")


@log_execution_time
def train(cfg: TrainConfig, scene: Optional[SyntheticScene] = None) -> TrainResult:
    """Fit a Gaussian set to the scene's training views; see TrainConfig for the schedule.

    Partition actions due at iteration `it` are applied once that iteration has
    densified, so densification always sees the group trained over its window.
    """
    cfg = cfg.validate()
    scene = scene if scene is not None else make_scene(cfg)
    gaussians = random_init(cfg.init_count, scene.bounds, np.random.default_rng([cfg.seed, 1]))
    extent = scene_extent(gaussians.means)
    views = ViewSampler(scene.train_ids, np.random.default_rng([cfg.seed, 2]))

    n = gaussians.count
    adam = AdamState.zeros(n)
    dstate = DensifyState.zeros(n)
    importance = ImportanceState.zeros(n)
    partition = GroupPartition.full(n, 0, cfg.strategy, cfg.utr)
    schedule = cfg.schedule() if cfg.grouped else None
    metrics, partitions = RunMetrics(), PartitionLog()
    contributors = ContributorLog(keep_population=cfg.log_contributors)
    resolution = max(scene.cameras[0].width, scene.cameras[0].height)

    progress = tqdm(range(1, cfg.iterations + 1), disable=cfg.quiet, desc=f"train[{cfg.strategy}]")
    for it in progress:
        wall = Stopwatch()
        with wall:
            active = partition.mask
            rendered_count, rendered_mb, under_training = gaussians.count, model_size_mb(gaussians), int(active.sum())
            cached = partition.cached if cfg.debug_checks else np.zeros(0, dtype=np.int64)
            frozen = _snapshot(gaussians, adam, cached) if cached.size else []

            view = views.next()
            cam = scene.cameras[view]
            forward = Stopwatch()
            with forward:
                out = render_forward(gaussians, cam, scene.background, active, cfg.t_saturation)
            loss, d_image = photometric_loss(out.image, scene.targets[view], cfg.lambda_dssim)
            if not math.isfinite(loss):
                raise TrainingDivergedError(it, loss)
            grads = render_backward(gaussians, cam, out, d_image)
            if cfg.debug_checks:
                _check_cached_exclusion(it, cached, out.per_gaussian_hits, grads.raw())

            step(gaussians, grads, adam, active, learning_rates(it, cfg.iterations, extent))
            accumulate_importance(importance, out)
            if cached.size:
                _check_frozen(it, frozen, _snapshot(gaussians, adam, cached))

            if it < cfg.densify_until:
                visible = np.zeros(gaussians.count, dtype=bool)
                visible[out.projection.gaussian_index] = True
                accumulate(dstate, grads, visible, scale=0.5 * resolution)
                if it > cfg.densify_from and it % cfg.densify_interval == 0:
                    result = densify_and_prune(
                        gaussians, dstate, adam, partition, cfg, it, extent, importance, contributors,
                    )
                    gaussians, dstate, adam = result.gaussians, result.state, result.adam
                    partition, importance = result.partition, result.importance
                if it % cfg.reset_interval == 0:
                    reset_opacity(gaussians, partition)

            if schedule is not None:
                action = tick(schedule, it)
                if action is Action.RESAMPLE:
                    partition = resample(gaussians, partition, cfg.strategy, cfg.utr, [cfg.seed, it, 3], importance, it)
                    partitions.record(it, action, partition)
                elif action is not Action.NONE:
                    partition = merge(partition, it)
                    partitions.record(it, action, partition)

        # counts describe the set this iteration rendered, before any densification
        record = IterationRecord(
            iteration=it, wall_ms=wall.elapsed_ms, forward_ms=forward.elapsed_ms,
            blended_ops=out.total_blends, count=rendered_count, under_training=under_training,
            hits=out.hit_gaussians, loss=loss, rss_mb=get_process_memory_usage_mb(),
            size_mb=rendered_mb,
        )
        if it % cfg.eval_interval == 0 or it == cfg.iterations:
            record.psnr, record.ssim = evaluate(gaussians, scene)
            logger.info("iteration %d: test PSNR %.2f dB, SSIM %.4f, %d primitives", it, record.psnr, record.ssim, gaussians.count)
        metrics.record(record)
        logger.debug("iteration %d: loss %.5f, view %d, %d blends", it, loss, view, record.blended_ops)
        progress.set_postfix(loss=f"{loss:.4f}", n=gaussians.count, active=record.under_training)

    if metrics.records and not math.isnan(metrics.records[-1].psnr):
        test_psnr, test_ssim = metrics.records[-1].psnr, metrics.records[-1].ssim
    else:
        test_psnr, test_ssim = evaluate(gaussians, scene)
    result = TrainResult(gaussians, metrics, partitions, contributors, adam, extent, test_psnr, test_ssim)
    if cfg.out_dir:
        write_run(result, scene, cfg, cfg.out_dir)
    return result


def write_run(result: TrainResult, scene: SyntheticScene, cfg: TrainConfig, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    save_model(result.gaussians, out / "model.npy")
    result.metrics.save(out / "metrics.csv")
    result.partitions.save(out / "partitions.csv")
    result.contributors.save(out / "densify.csv")
    result.contributors.events_frame().to_csv(out / "densify_events.csv", index=False)
    if cfg.save_test_renders:
        for view in scene.test_ids:
            save_png(render_image(result.gaussians, scene.cameras[view], scene.background), out / f"test_{view:02d}.png")
    logger.info("run written to %s", out)
    return out


# Command line

_NONE_DEFAULT_TYPES = {"scene_path": str, "out_dir": str}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        if f.name in ("seed", "out_dir"):
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if isinstance(default, bool):
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, list):
            parser.add_argument(flag, dest=f.name, type=float, nargs=3, default=None)
        elif default is None:
            parser.add_argument(flag, dest=f.name, type=_NONE_DEFAULT_TYPES.get(f.name, int), default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=type(default), default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=Path, default=None, help="output directory (or file for export/import)")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="harness.py", description="Group-trained Gaussian splatting on the CPU")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, aliases, help_text in [
        ("train", [], "train one model"),
        ("compare", [], "train every variant and compare efficiency / quality"),
        ("prop1", ["contributors"], "opacity / volume of densification contributors"),
        ("prop2", ["blend-depth"], "blend depth versus mean opacity"),
        ("grad-oracle", [], "expected alpha-gradient closed form versus Monte-Carlo"),
        ("sweep", [], "pruning threshold versus caching ratio sweep"),
    ]:
        p = sub.add_parser(name, aliases=aliases, parents=[common], help=help_text)
        _add_config_flags(p)
        if name == "compare":
            p.add_argument("--variants", nargs="+", default=None, help="variant names (default: all)")
            p.add_argument("--seeds", type=int, nargs="+", default=None)
            p.add_argument("--processes", type=int, default=1)
        if name == "sweep":
            p.add_argument("--seeds", type=int, nargs="+", default=None)

    p = sub.add_parser("render", parents=[common], help="render a saved model to PNG")
    _add_config_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--view", type=int, default=0, help="orbit camera index")

    p = sub.add_parser("export", parents=[common], help="native model -> PLY")
    p.add_argument("--model", type=Path, required=True)

    p = sub.add_parser("import", parents=[common], help="PLY -> native model")
    p.add_argument("--ply", type=Path, required=True)
    return parser


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    overrides = {name: getattr(args, name) for name in FIELD_NAMES if hasattr(args, name)}
    overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return load_config(args.config, overrides)


def _load_any(path: Path) -> GaussianSet:
    return load_ply(path) if path.suffix.lower() == ".ply" else load_model(path)


def cli(argv: Optional[Sequence[str]] = None) -> int:
    import analysis

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.log_level)

    try:
        if args.command == "export":
            save_ply(load_model(args.model), args.out or args.model.with_suffix(".ply"))
            return 0
        if args.command == "import":
            save_model(load_ply(args.ply), args.out or args.ply.with_suffix(".npy"))
            return 0

        cfg = _config_from_args(args)
        out = Path(cfg.out_dir) if cfg.out_dir else Path("runs") / args.command
        if args.command == "train":
            cfg.out_dir = str(out)
            result = train(cfg)
            print(f"test PSNR {result.test_psnr:.2f} dB, SSIM {result.test_ssim:.4f}, {result.gaussians.count} primitives")
        elif args.command == "render":
            cam = orbit_cameras(cfg.num_views, cfg.resolution)[args.view]
            target = out if out.suffix.lower() == ".png" else out / f"view_{args.view:02d}.png"
            target.parent.mkdir(parents=True, exist_ok=True)
            save_png(render_image(_load_any(args.model), cam, cfg.background), target)
        elif args.command == "compare":
            analysis.run_comparison(cfg, out, variants=args.variants, seeds=args.seeds, processes=args.processes)
        elif args.command in ("prop1", "contributors"):
            analysis.run_contributor_stats(cfg, out, report="prop1" if args.command == "prop1" else "contributor")
        elif args.command in ("prop2", "blend-depth"):
            analysis.run_blend_depth(cfg, out, report="prop2" if args.command == "prop2" else "blend_depth")
        elif args.command == "grad-oracle":
            analysis.run_grad_oracle(cfg, out)
        elif args.command == "sweep":
            analysis.run_sweep(cfg, out, seeds=args.seeds)
    except SplatError as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(cli())
