"""
Experiment runners. Each writes CSV reports into its output directory and
returns the same tables as DataFrames.

- run_contributor_stats: opacity / volume of the primitives that trigger densification
- run_blend_depth: blend depth and forward time versus mean opacity
- run_grad_oracle: expected alpha-gradient closed form versus Monte-Carlo
- run_comparison: every sampling strategy against the baseline
- run_sweep: pruning threshold versus caching ratio
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial
from multiprocessing import Pool
from pathlib import Path
import logging
import math
import typing

import numpy as np
import pandas as pd
from scipy.special import logit

from config import TrainConfig
from errors import SplatError
from harness import train
from model import GaussianSet, memory_footprint_mb, random_rotations
from render import expected_blend_depth_oracle, expected_grad_magnitude_oracle, render_forward
from scene import orbit_cameras
from utils import Stopwatch, collect_garbage, log_execution_time, log_memory_usage

if typing.TYPE_CHECKING:
    from typing import *


logger = logging.getLogger(__name__)

HIST_BINS = 20
SIM_CHUNK = 4096
ALPHA_SPREAD = 0.25


def _prepare(out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# i.i.d. blending model

@dataclass
class BlendSimulation:
    stop_index: np.ndarray   # number of blended primitives per sequence
    final_t: np.ndarray      # transmittance after the last blend
    grad: np.ndarray         # dC/d alpha_m at a uniformly drawn blended position m

    @property
    def mean_stop_index(self) -> float:
        return float(self.stop_index.mean())

    @property
    def mean_final_t(self) -> float:
        return float(self.final_t.mean())

    @property
    def mean_grad(self) -> float:
        return float(self.grad.mean())


def simulate_iid_blending(
    mean_alpha: float,
    t_saturation: float,
    n: int,
    rng: np.random.Generator,
    c0: float = 1.0,
    c_bg: float = 0.0,
    chunk: int = SIM_CHUNK,
) -> BlendSimulation:
    """Blend i.i.d. alphas front to back until T drops below T_sat, `n` times.

    Alphas are uniform on mean +- 0.25 * min(mean, 1 - mean). With a constant
    colour c0 the alpha gradient at position m reduces to (c0 - c_bg) T_N / (1 - alpha_m).
    """
    if not 0.0 < mean_alpha < 1.0:
        raise ValueError(f"mean_alpha must lie in (0, 1), got {mean_alpha}")
    if not 0.0 < t_saturation < 1.0:
        raise ValueError(f"t_saturation must lie in (0, 1), got {t_saturation}")
    half = ALPHA_SPREAD * min(mean_alpha, 1.0 - mean_alpha)
    lo, hi = mean_alpha - half, mean_alpha + half
    length = int(math.ceil(math.log(t_saturation) / math.log1p(-lo))) + 2

    stops, finals, grads = [], [], []
    for start in range(0, n, chunk):
        size = min(chunk, n - start)
        alpha = rng.uniform(lo, hi, size=(size, length))
        after = np.cumprod(1.0 - alpha, axis=1)
        # blend k while the transmittance in front of it is >= T_sat
        stop = (after >= t_saturation).sum(axis=1) + 1
        rows = np.arange(size)
        final_t = after[rows, stop - 1]
        m = (rng.random(size) * stop).astype(np.int64)
        stops.append(stop)
        finals.append(final_t)
        grads.append((c0 - c_bg) * final_t / (1.0 - alpha[rows, m]))
    return BlendSimulation(np.concatenate(stops), np.concatenate(finals), np.concatenate(grads))


@log_execution_time
def run_grad_oracle(cfg: TrainConfig, out_dir: Union[str, Path], samples: int = 100_000,
            mean_alphas: Sequence[float] = (0.1, 0.3, 0.5), c0: float = 1.0, c_bg: float = 0.0) -> pd.DataFrame:
    out = _prepare(out_dir)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for a in mean_alphas:
        sim = simulate_iid_blending(a, cfg.t_saturation, samples, rng, c0, c_bg)
        at_tn = float(expected_grad_magnitude_oracle(a, 1.0, [c0], [c_bg], sim.mean_final_t)[0])
        nominal = float(expected_grad_magnitude_oracle(a, 1.0, [c0], [c_bg], cfg.t_saturation)[0])
        depth = expected_blend_depth_oracle(a, 1.0, cfg.t_saturation)
        rows.append({
            "mean_alpha": a,
            "mc_grad": sim.mean_grad,
            "closed_form": at_tn,
            "rel_error": abs(sim.mean_grad - at_tn) / abs(at_tn),
            "mean_final_t": sim.mean_final_t,
            "closed_form_nominal": nominal,
            "rel_error_nominal": abs(sim.mean_grad - nominal) / abs(nominal),
            "final_t_over_t_sat": sim.mean_final_t / cfg.t_saturation,
            "mc_stop_index": sim.mean_stop_index,
            "predicted_depth": depth,
            "depth_rel_error": abs(sim.mean_stop_index - depth) / depth,
        })
        logger.info("E[alpha]=%.2f: MC %.4g vs closed form %.4g (%.4g at the nominal saturation)", a, sim.mean_grad, at_tn, nominal)
    frame = pd.DataFrame(rows)
    frame.to_csv(out / "grad_oracle.csv", index=False)
    return frame


# Opacity sweep

@dataclass
class BlendDepthParams:
    count: int = 10_000
    resolution: int = 256
    views: int = 8
    opacity_sigma: float = 0.1
    means: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    scale_range: Tuple[float, float] = (0.04, 0.1)
    focal_factor: float = 2.0
    mc_samples: int = 100_000


@dataclass
class BlendDepthReport:
    frame: pd.DataFrame
    monotone: bool
    reduction: float  # relative drop in mean blend count from mean opacity 0.3 to 0.9


def make_opacity_sweep_scene(params: BlendDepthParams, rng: np.random.Generator) -> Tuple[GaussianSet, np.ndarray]:
    """Fixed random scene plus standard-normal draws that set every opacity of the sweep."""
    lo, hi = np.log(params.scale_range[0]), np.log(params.scale_range[1])
    gaussians = GaussianSet(
        means=rng.uniform(-0.5, 0.5, size=(params.count, 3)),
        log_scales=rng.uniform(lo, hi, size=(params.count, 3)),
        rotations=random_rotations(params.count, rng),
        opacity_logits=np.zeros(params.count),
        colors=rng.uniform(0.0, 1.0, size=(params.count, 3)),
    )
    return gaussians, rng.standard_normal(params.count)


@log_execution_time
def run_blend_depth(cfg: TrainConfig, out_dir: Union[str, Path], params: Optional[BlendDepthParams] = None,
                    report: str = "blend_depth") -> BlendDepthReport:
    """Blend depth and forward time per mean opacity; writes `<report>.csv`."""
    params = params or BlendDepthParams()
    out = _prepare(out_dir)
    rng = np.random.default_rng(cfg.seed)
    gaussians, z = make_opacity_sweep_scene(params, rng)
    cameras = orbit_cameras(params.views, params.resolution, focal_factor=params.focal_factor)
    background = np.zeros(3)

    rows = []
    for mu in params.means:
        opacity = np.clip(mu + params.opacity_sigma * z, 0.01, 0.99)
        gaussians.opacity_logits = logit(opacity)
        blends, alpha_total, timer = 0, 0.0, Stopwatch()
        for cam in cameras:
            with timer:
                output = render_forward(gaussians, cam, background, t_saturation=cfg.t_saturation)
            blends += output.total_blends
            alpha_total += float(output.alpha_sum.sum())
        pixels = params.views * params.resolution * params.resolution
        measured_alpha = alpha_total / blends if blends else math.nan
        row = {
            "mean_opacity": mu,
            "actual_mean_opacity": float(opacity.mean()),
            "mean_blend_count": blends / pixels,
            "forward_ms": timer.elapsed_ms / params.views,
            "measured_mean_alpha": measured_alpha,
        }
        if 0.0 < measured_alpha < 1.0:
            sim = simulate_iid_blending(measured_alpha, cfg.t_saturation, params.mc_samples, rng)
            row["predicted_depth"] = expected_blend_depth_oracle(measured_alpha, 1.0, cfg.t_saturation)
            row["mc_stop_index"] = sim.mean_stop_index
            row["depth_rel_error"] = abs(sim.mean_stop_index - row["predicted_depth"]) / row["predicted_depth"]
        rows.append(row)
        logger.info("mean opacity %.1f: %.2f blends per pixel, %.1f ms per view", mu, row["mean_blend_count"], row["forward_ms"])

    frame = pd.DataFrame(rows)
    counts = frame["mean_blend_count"].to_numpy()
    monotone = bool(np.all(np.diff(counts) <= 0))
    by_mu = dict(zip(np.round(frame["mean_opacity"], 6), counts))
    reduction = 1.0 - by_mu[0.9] / by_mu[0.3] if 0.3 in by_mu and 0.9 in by_mu and by_mu[0.3] > 0 else math.nan
    frame["monotone"] = monotone
    frame.to_csv(out / f"{report}.csv", index=False)
    return BlendDepthReport(frame, monotone, reduction)


# Densification contributors

@dataclass
class ContributorReport:
    histograms: pd.DataFrame
    summary: pd.DataFrame
    opacity_higher_fraction: float  # share of densify steps where contributors are more opaque
    late_volume_lower: bool         # contributors smaller than the population over the last third


def _histogram_rows(iteration: int, group: str, quantity: str, values: np.ndarray, edges: np.ndarray) -> List[Dict[str, Any]]:
    counts, _ = np.histogram(values, bins=edges)
    return [
        {"iteration": iteration, "group": group, "quantity": quantity,
         "bin_lo": edges[i], "bin_hi": edges[i + 1], "count": int(counts[i])}
        for i in range(len(counts))
    ]


@log_memory_usage
@log_execution_time
def run_contributor_stats(cfg: TrainConfig, out_dir: Union[str, Path], report: str = "contributor") -> ContributorReport:
    """One training run with contributor logging; writes `<report>_histograms.csv`, `_summary.csv` and `_rows.csv`."""
    out = _prepare(out_dir)
    cfg = replace(cfg, log_contributors=True, out_dir=None).validate()
    result = train(cfg)
    log = result.contributors
    contrib = log.to_frame()

    all_volumes = [np.log10(vol) for _, _, vol in log.populations]
    if all_volumes and np.concatenate(all_volumes).size:
        pooled = np.concatenate(all_volumes)
        volume_edges = np.linspace(pooled.min(), pooled.max() + 1e-9, HIST_BINS + 1)
    else:
        volume_edges = np.linspace(-9.0, 0.0, HIST_BINS + 1)
    opacity_edges = np.linspace(0.0, 1.0, HIST_BINS + 1)

    hist_rows, summary_rows = [], []
    for event, (iteration, opacity, vol) in zip(log.events, log.populations):
        mine = contrib[contrib["iteration"] == iteration]
        c_opacity, c_volume = mine["opacity"].to_numpy(), mine["volume"].to_numpy()
        hist_rows += _histogram_rows(iteration, "population", "opacity", opacity, opacity_edges)
        hist_rows += _histogram_rows(iteration, "contributor", "opacity", c_opacity, opacity_edges)
        hist_rows += _histogram_rows(iteration, "population", "log10_volume", np.log10(vol), volume_edges)
        hist_rows += _histogram_rows(iteration, "contributor", "log10_volume", np.log10(c_volume), volume_edges)
        summary_rows.append({
            "iteration": iteration,
            "count": event.count_before,
            "contributors": c_opacity.size,
            "population_opacity": event.population_opacity,
            "contributor_opacity": event.contributor_opacity,
            "population_volume": event.population_volume,
            "contributor_volume": event.contributor_volume,
            "opacity_higher": bool(c_opacity.size and event.contributor_opacity > event.population_opacity),
            "volume_lower": bool(c_opacity.size and event.contributor_volume < event.population_volume),
        })

    histograms = pd.DataFrame(hist_rows, columns=["iteration", "group", "quantity", "bin_lo", "bin_hi", "count"])
    summary = pd.DataFrame(summary_rows, columns=[
        "iteration", "count", "contributors", "population_opacity", "contributor_opacity",
        "population_volume", "contributor_volume", "opacity_higher", "volume_lower",
    ])
    with_contrib = summary[summary["contributors"] > 0]
    opacity_fraction = float(with_contrib["opacity_higher"].mean()) if len(with_contrib) else math.nan

    late_start = cfg.densify_from + 2.0 * (cfg.densify_until - cfg.densify_from) / 3.0
    late = [(it, vol) for it, _, vol in log.populations if it >= late_start]
    late_contrib = contrib[contrib["iteration"] >= late_start]["volume"].to_numpy()
    if late and late_contrib.size:
        late_volume_lower = bool(late_contrib.mean() < np.concatenate([v for _, v in late]).mean())
    else:
        late_volume_lower = False

    histograms.to_csv(out / f"{report}_histograms.csv", index=False)
    summary.to_csv(out / f"{report}_summary.csv", index=False)
    contrib.to_csv(out / f"{report}_rows.csv", index=False)
    if not math.isnan(opacity_fraction):
        logger.info("contributors more opaque at %.0f%% of densify steps", 100 * opacity_fraction)
    return ContributorReport(histograms, summary, opacity_fraction, late_volume_lower)


# Strategy comparison

BASE_STRATEGIES = ("random", "opacity", "volume", "volume_opacity", "importance")

VARIANTS: Dict[str, Dict[str, Any]] = {"baseline": {"strategy": "none"}}
VARIANTS.update({name: {"strategy": name, "scope": "full"} for name in BASE_STRATEGIES})
VARIANTS.update({f"{name}@densify_only": {"strategy": name, "scope": "densify_only"} for name in BASE_STRATEGIES})
VARIANTS.update({
    "opacity-no-cyclic": {"strategy": "opacity", "cyclic_resample": False},
    "opacity-no-global-densify": {"strategy": "opacity", "global_densify": False},
    "opacity-no-global-optimize": {"strategy": "opacity", "global_optimize": False},
})


@dataclass
class ComparisonReport:
    runs: pd.DataFrame
    medians: pd.DataFrame
    relative: pd.DataFrame
    curves: Dict[Tuple[str, int], pd.DataFrame] = field(repr=False, default_factory=dict)


def _run_variant(cfg: TrainConfig, name: str, overrides: Mapping[str, Any], seed: int) -> Tuple[Dict[str, Any], pd.DataFrame]:
    run_cfg = replace(cfg, **overrides, seed=seed, out_dir=None, quiet=True)
    row: Dict[str, Any] = {"variant": name, "seed": seed, "failed": False, "error": ""}
    try:
        result = train(run_cfg)
    except SplatError as exc:
        # the failure travels back as a row; the exception stays in this process
        logger.warning("variant %s (seed %d) failed: %s", name, seed, exc)
        row.update(failed=True, error=str(exc), psnr=math.nan, ssim=math.nan, blended_ops=math.nan,
                   wall_ms=math.nan, forward_ms=math.nan, count=math.nan, max_rss_mb=math.nan, size_mb=math.nan,
                   footprint_mb=math.nan)
        return row, pd.DataFrame()
    finally:
        collect_garbage()
    curve = result.metrics.to_frame()
    row.update(
        psnr=result.test_psnr,
        ssim=result.test_ssim,
        blended_ops=result.metrics.total_blended_ops,
        wall_ms=result.metrics.total_wall_ms,
        forward_ms=result.metrics.total_forward_ms,
        count=result.gaussians.count,
        max_rss_mb=float(curve["rss_mb"].max()) if len(curve) else math.nan,
        size_mb=float(curve["size_mb"].iloc[-1]) if len(curve) else math.nan,
        footprint_mb=memory_footprint_mb(result.gaussians, result.adam),
    )
    return row, curve


def _relative(medians: pd.DataFrame) -> pd.DataFrame:
    if "baseline" not in medians.index:
        return pd.DataFrame()
    base = medians.loc["baseline"]
    return pd.DataFrame({
        "blended_ops_ratio": medians["blended_ops"] / base["blended_ops"],
        "wall_ratio": medians["wall_ms"] / base["wall_ms"],
        "psnr_delta": medians["psnr"] - base["psnr"],
        "count_ratio": medians["count"] / base["count"],
    })


@log_execution_time
def run_comparison(
    cfg: TrainConfig,
    out_dir: Union[str, Path],
    variants: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
    processes: int = 1,
) -> ComparisonReport:
    """Train every (variant, seed) with the same budget; rows keep variant order."""
    out = _prepare(out_dir)
    names = list(variants) if variants else list(VARIANTS)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; known: {list(VARIANTS)}")
    seeds = list(seeds) if seeds else [cfg.seed]
    jobs = [(name, VARIANTS[name], seed) for name in names for seed in seeds]

    if processes > 1:
        with Pool(processes) as pool:
            results = pool.starmap(partial(_run_variant, cfg), jobs)
    else:
        results = [_run_variant(cfg, *job) for job in jobs]

    curves_dir = out / "metrics"
    curves_dir.mkdir(exist_ok=True)
    curves = {}
    for (name, _, seed), (_, curve) in zip(jobs, results):
        curves[(name, seed)] = curve
        curve.to_csv(curves_dir / f"{name}_seed{seed}.csv", index=False)

    runs = pd.DataFrame([row for row, _ in results])
    numeric = ["psnr", "ssim", "blended_ops", "wall_ms", "forward_ms", "count", "max_rss_mb", "size_mb", "footprint_mb"]
    medians = runs[~runs["failed"]].groupby("variant", sort=False)[numeric].median()
    medians = medians.reindex([n for n in names if n in medians.index])
    relative = _relative(medians)

    runs.to_csv(out / "comparison.csv", index=False)
    medians.to_csv(out / "comparison_median.csv")
    relative.to_csv(out / "comparison_relative.csv")
    return ComparisonReport(runs, medians, relative, curves)


# Sensitivity sweep

@log_execution_time
def run_sweep(
    cfg: TrainConfig,
    out_dir: Union[str, Path],
    seeds: Optional[Sequence[int]] = None,
    thresholds: Sequence[float] = (0.001, 0.005, 0.01, 0.02, 0.05),
    caching_ratios: Sequence[float] = (0.0, 0.2, 0.4, 0.6),
) -> pd.DataFrame:
    """Raise the pruning threshold on the baseline vs. cache more of the set with opacity sampling."""
    out = _prepare(out_dir)
    seeds = list(seeds) if seeds else [cfg.seed]
    rows = []
    points = [("min_opacity", t, {"strategy": "none", "min_opacity": t}) for t in thresholds]
    points += [("caching_ratio", r, {"strategy": "opacity", "utr": 1.0 - r}) for r in caching_ratios]
    for kind, value, overrides in points:
        for seed in seeds:
            row, _ = _run_variant(cfg, f"{kind}={value}", overrides, seed)
            row.update(kind=kind, value=value)
            rows.append(row)
    frame = pd.DataFrame(rows)
    frame.to_csv(out / "sweep.csv", index=False)
    return frame
