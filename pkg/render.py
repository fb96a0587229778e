"""
Tile-based differentiable rasteriser for Gaussian primitives.

Forward: EWA projection, per-tile depth-sorted lists, front-to-back alpha
blending with transmittance early termination. Backward: analytic gradients
for every raw parameter, plus the screen-space mean gradients used by
densification.

Tiles are processed in fixed batches. A batch is a dense (tiles, K, pixels)
block where K is the longest depth-sorted list in the batch; the same batches
are used whether they run sequentially or on worker threads, and per-primitive
results are merged in batch order, so both modes give bit-identical output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from multiprocessing.pool import ThreadPool
from pathlib import Path
import logging
import math
import typing

import numpy as np
from PIL import Image

from errors import ModelIOError, OracleDomainError, ShapeMismatchError
from model import Camera, GaussianSet, activate, build_covariances, quaternion_to_rotation
from utils import get_num_threads

if typing.TYPE_CHECKING:
    from typing import *


logger = logging.getLogger(__name__)

TILE_SIZE = 16
TILE_PIXELS = TILE_SIZE * TILE_SIZE
NEAR_CLIP = 0.01
LOWPASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_SATURATION = 1e-4

TILES_PER_BATCH = 8
BLEND_CHUNK = 32


@dataclass(frozen=True)
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: int
    gaussian_index: int


@dataclass
class Projection:
    """Projected primitives as parallel arrays (only those that survive culling)."""

    gaussian_index: np.ndarray  # (M,) rows of the GaussianSet
    mean2d: np.ndarray          # (M, 2) pixels
    cov2d: np.ndarray           # (M, 2, 2) pixels^2, low-pass floor included
    conic: np.ndarray           # (M, 3) a, b, c of the inverse 2D covariance
    depth: np.ndarray           # (M,)
    radius: np.ndarray          # (M,) int, 3 sigma bound
    points_cam: np.ndarray      # (M, 3)
    jacobian: np.ndarray        # (M, 2, 3)
    cov3d: np.ndarray           # (M, 3, 3)
    opacities: np.ndarray       # (M,)
    colors: np.ndarray          # (M, 3)

    def __len__(self) -> int:
        return self.gaussian_index.shape[0]

    def __getitem__(self, i: int) -> Projected2D:
        return Projected2D(
            mean2d=self.mean2d[i], cov2d=self.cov2d[i], depth=float(self.depth[i]),
            radius=int(self.radius[i]), gaussian_index=int(self.gaussian_index[i]),
        )

    def __iter__(self) -> Iterator[Projected2D]:
        for i in range(len(self)):
            yield self[i]


@dataclass
class TileBins:
    """Projected-primitive lists per tile, each sorted by (depth, primitive index)."""

    entries: np.ndarray  # projected slot of every (tile, primitive) pair, tile-major
    starts: np.ndarray
    ends: np.ndarray
    tiles_x: int
    tiles_y: int

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_y


@dataclass
class RenderOutput:
    image: np.ndarray                 # (H, W, 3)
    blend_counts: np.ndarray          # (H, W) int
    per_gaussian_hits: np.ndarray     # (N,) int
    final_transmittance: np.ndarray   # (H, W)
    per_gaussian_weights: np.ndarray  # (N,) sum over pixels of alpha * T
    alpha_sum: np.ndarray             # (H, W) sum of blended alphas
    background: np.ndarray
    t_saturation: float
    projection: Projection = field(repr=False)
    bins: TileBins = field(repr=False)
    tile_contributors: np.ndarray = field(repr=False)  # per tile, 1 + last list slot that blended

    @property
    def total_blends(self) -> int:
        return int(self.blend_counts.sum())

    @property
    def hit_gaussians(self) -> int:
        return int(np.count_nonzero(self.per_gaussian_hits))


@dataclass
class GradientBuffer:
    d_means2d: np.ndarray        # (N, 2) dL/d(x_m, y_m) in pixels
    d_opacity: np.ndarray        # (N,) w.r.t. activated opacity
    d_color: np.ndarray          # (N, 3)
    d_cov2d: np.ndarray          # (N, 2, 2)
    d_mean3d: np.ndarray         # (N, 3)
    d_log_scale: np.ndarray      # (N, 3)
    d_rotation: np.ndarray       # (N, 4)
    d_opacity_logit: np.ndarray  # (N,)

    @classmethod
    def zeros(cls, n: int) -> GradientBuffer:
        return cls(
            d_means2d=np.zeros((n, 2)), d_opacity=np.zeros(n), d_color=np.zeros((n, 3)),
            d_cov2d=np.zeros((n, 2, 2)), d_mean3d=np.zeros((n, 3)), d_log_scale=np.zeros((n, 3)),
            d_rotation=np.zeros((n, 4)), d_opacity_logit=np.zeros(n),
        )

    def raw(self) -> Dict[str, np.ndarray]:
        """Gradients keyed by GaussianSet parameter name."""
        return {
            "means": self.d_mean3d,
            "log_scales": self.d_log_scale,
            "rotations": self.d_rotation,
            "opacity_logits": self.d_opacity_logit,
            "colors": self.d_color,
        }


# Projection

def project(gaussians: GaussianSet, cam: Camera, active: Optional[np.ndarray] = None) -> Projection:
    """EWA-project the (active) primitives and cull those behind the camera or off-screen."""
    if active is None:
        index = np.arange(gaussians.count)
    else:
        if active.shape != (gaussians.count,):
            raise ShapeMismatchError(f"active mask has shape {active.shape}, expected ({gaussians.count},)")
        index = np.flatnonzero(active)
    act = activate(gaussians, index)

    points_cam = gaussians.means[index] @ cam.rotation.T + cam.translation
    front = points_cam[:, 2] > NEAR_CLIP
    index, points_cam = index[front], points_cam[front]

    x, y, z = points_cam[:, 0], points_cam[:, 1], points_cam[:, 2]
    jacobian = np.zeros((len(index), 2, 3))
    jacobian[:, 0, 0] = cam.fx / z
    jacobian[:, 0, 2] = -cam.fx * x / (z * z)
    jacobian[:, 1, 1] = cam.fy / z
    jacobian[:, 1, 2] = -cam.fy * y / (z * z)

    cov3d = build_covariances(gaussians.log_scales[index], gaussians.rotations[index])
    t = jacobian @ cam.rotation
    cov2d = t @ cov3d @ np.swapaxes(t, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lambda_max = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radius = np.ceil(3.0 * np.sqrt(lambda_max)).astype(np.int64)

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    onscreen = (
        (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width - 1)
        & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height - 1)
    )

    act_opacity = act.opacities[front]
    keep = onscreen
    return Projection(
        gaussian_index=index[keep], mean2d=mean2d[keep], cov2d=cov2d[keep], conic=conic[keep],
        depth=z[keep], radius=radius[keep], points_cam=points_cam[keep], jacobian=jacobian[keep],
        cov3d=cov3d[keep], opacities=act_opacity[keep], colors=gaussians.colors[index[keep]],
    )


def bin_tiles(proj: Projection, cam: Camera) -> TileBins:
    """Duplicate every primitive into the tiles its 3 sigma box touches; sort by (tile, depth)."""
    tiles_x = -(-cam.width // TILE_SIZE)
    tiles_y = -(-cam.height // TILE_SIZE)
    n = len(proj)
    if n == 0:
        zeros = np.zeros(tiles_x * tiles_y, dtype=np.int64)
        return TileBins(np.zeros(0, dtype=np.int64), zeros, zeros.copy(), tiles_x, tiles_y)

    u, v, r = proj.mean2d[:, 0], proj.mean2d[:, 1], proj.radius
    tx0 = np.clip(np.floor((u - r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((u + r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((v - r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((v + r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    span_x = tx1 - tx0 + 1
    counts = span_x * (ty1 - ty0 + 1)

    # depth rank; equal depths fall back to the primitive index
    rank = np.empty(n, dtype=np.int64)
    rank[np.lexsort((proj.gaussian_index, proj.depth))] = np.arange(n)

    slot = np.repeat(np.arange(n), counts)
    offset = np.arange(slot.size) - np.repeat(np.cumsum(counts) - counts, counts)
    tile = (ty0[slot] + offset // span_x[slot]) * tiles_x + tx0[slot] + offset % span_x[slot]

    order = np.lexsort((rank[slot], tile))
    entries, tile = slot[order], tile[order]
    tile_ids = np.arange(tiles_x * tiles_y)
    return TileBins(
        entries=entries,
        starts=np.searchsorted(tile, tile_ids, side="left"),
        ends=np.searchsorted(tile, tile_ids, side="right"),
        tiles_x=tiles_x,
        tiles_y=tiles_y,
    )


# Shared per-batch geometry

@dataclass
class _Batch:
    tiles: np.ndarray      # (B,)
    px: np.ndarray         # (B, P) pixel x
    py: np.ndarray         # (B, P) pixel y
    pixel_ok: np.ndarray   # (B, P) inside the image
    slots: np.ndarray      # (B, K) projected slot or -1


def _batches(bins: TileBins, cam: Camera) -> List[np.ndarray]:
    tiles = np.arange(bins.num_tiles)
    return [tiles[i:i + TILES_PER_BATCH] for i in range(0, bins.num_tiles, TILES_PER_BATCH)]


def _make_batch(tiles: np.ndarray, bins: TileBins, cam: Camera, depth_limit: Optional[np.ndarray] = None) -> _Batch:
    local = np.arange(TILE_PIXELS)
    px = (tiles % bins.tiles_x)[:, None] * TILE_SIZE + local[None, :] % TILE_SIZE
    py = (tiles // bins.tiles_x)[:, None] * TILE_SIZE + local[None, :] // TILE_SIZE
    lengths = bins.ends[tiles] - bins.starts[tiles]
    if depth_limit is not None:
        lengths = np.minimum(lengths, depth_limit)
    k = int(lengths.max()) if len(tiles) else 0
    positions = bins.starts[tiles][:, None] + np.arange(k)[None, :]
    valid = np.arange(k)[None, :] < lengths[:, None]
    slots = np.where(valid, bins.entries[np.where(valid, positions, 0)] if bins.entries.size else 0, -1)
    return _Batch(tiles=tiles, px=px, py=py, pixel_ok=(px < cam.width) & (py < cam.height), slots=slots)


def _alpha(proj: Projection, batch: _Batch, slots: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Per (tile, slot, pixel): alpha after clamp/skip, G, offsets, and the unclamped mask."""
    safe = np.maximum(slots, 0)
    dx = batch.px[:, None, :] - proj.mean2d[safe, 0][:, :, None]
    dy = batch.py[:, None, :] - proj.mean2d[safe, 1][:, :, None]
    a = proj.conic[safe, 0][:, :, None]
    b = proj.conic[safe, 1][:, :, None]
    c = proj.conic[safe, 2][:, :, None]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    g = np.exp(np.minimum(power, 0.0))
    raw_alpha = proj.opacities[safe][:, :, None] * g
    alpha = np.minimum(ALPHA_MAX, raw_alpha)
    usable = (slots >= 0)[:, :, None] & batch.pixel_ok[:, None, :] & (alpha >= ALPHA_MIN)
    alpha = np.where(usable, alpha, 0.0)
    return alpha, g, dx, dy, raw_alpha < ALPHA_MAX


def _blend_mask(alpha: np.ndarray, carry: np.ndarray, t_saturation: float) -> Tuple[np.ndarray, np.ndarray]:
    """Transmittance in front of each slot and whether the slot is blended.

    The running product includes skipped slots (factor exactly 1), so it equals
    the product over blended slots up to the first slot that finds T < T_sat.
    """
    prods = np.cumprod(np.concatenate([carry[:, None, :], 1.0 - alpha], axis=1), axis=1)
    before = prods[:, :-1]
    blended = (alpha > 0.0) & (before >= t_saturation)
    return before, blended, prods[:, -1]


# Forward

def _forward_batch(proj: Projection, bins: TileBins, cam: Camera, tiles: np.ndarray, t_saturation: float) -> Dict[str, np.ndarray]:
    batch = _make_batch(tiles, bins, cam)
    n_tiles = len(tiles)
    carry = np.ones((n_tiles, TILE_PIXELS))
    final_t = np.ones((n_tiles, TILE_PIXELS))
    color = np.zeros((n_tiles, TILE_PIXELS, 3))
    counts = np.zeros((n_tiles, TILE_PIXELS), dtype=np.int64)
    alpha_sum = np.zeros((n_tiles, TILE_PIXELS))
    contributors = np.zeros(n_tiles, dtype=np.int64)
    slot_parts, hit_parts, weight_parts = [], [], []

    k_total = batch.slots.shape[1]
    for k0 in range(0, k_total, BLEND_CHUNK):
        slots = batch.slots[:, k0:k0 + BLEND_CHUNK]
        alpha, _, _, _, _ = _alpha(proj, batch, slots)
        before, blended, carry = _blend_mask(alpha, carry, t_saturation)
        a_eff = np.where(blended, alpha, 0.0)
        weight = a_eff * before

        color += np.einsum("bkp,bkc->bpc", weight, proj.colors[np.maximum(slots, 0)])
        counts += blended.sum(axis=1)
        alpha_sum += a_eff.sum(axis=1)
        final_t = np.cumprod(np.concatenate([final_t[:, None, :], 1.0 - a_eff], axis=1), axis=1)[:, -1]

        any_blend = blended.any(axis=2)
        last = np.where(any_blend, np.arange(slots.shape[1])[None, :] + k0 + 1, 0).max(axis=1)
        contributors = np.maximum(contributors, last)

        live = slots >= 0
        slot_parts.append(slots[live])
        hit_parts.append(blended.sum(axis=2)[live])
        weight_parts.append(weight.sum(axis=2)[live])

        # every pixel of the batch saturated: nothing further can blend
        if np.all((carry < t_saturation) | ~batch.pixel_ok):
            break

    return {
        "tiles": tiles, "px": batch.px, "py": batch.py, "pixel_ok": batch.pixel_ok,
        "color": color, "counts": counts, "final_t": final_t, "alpha_sum": alpha_sum,
        "contributors": contributors,
        "slots": np.concatenate(slot_parts) if slot_parts else np.zeros(0, dtype=np.int64),
        "hits": np.concatenate(hit_parts) if hit_parts else np.zeros(0, dtype=np.int64),
        "weights": np.concatenate(weight_parts) if weight_parts else np.zeros(0),
    }


def _run_batches(work: Callable[[np.ndarray], Dict[str, np.ndarray]], batches: List[np.ndarray], threads: Optional[int]) -> List[Dict[str, np.ndarray]]:
    threads = get_num_threads() if threads is None else threads
    if threads <= 1 or len(batches) <= 1:
        return [work(tiles) for tiles in batches]
    with ThreadPool(min(threads, len(batches))) as pool:
        # map keeps batch order, so the merge below is independent of scheduling
        return pool.map(work, batches)


def render_forward(
    gaussians: GaussianSet,
    cam: Camera,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    active: Optional[np.ndarray] = None,
    t_saturation: float = T_SATURATION,
    threads: Optional[int] = None,
) -> RenderOutput:
    """Render one view; only `active` primitives (all by default) take part."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(gaussians, cam, active)
    bins = bin_tiles(proj, cam)

    height, width = cam.height, cam.width
    image = np.zeros((height, width, 3))
    blend_counts = np.zeros((height, width), dtype=np.int64)
    final_t = np.ones((height, width))
    alpha_sum = np.zeros((height, width))
    contributors = np.zeros(bins.num_tiles, dtype=np.int64)
    slot_parts, hit_parts, weight_parts = [], [], []

    def work(tiles: np.ndarray) -> Dict[str, np.ndarray]:
        return _forward_batch(proj, bins, cam, tiles, t_saturation)

    for part in _run_batches(work, _batches(bins, cam), threads):
        ok = part["pixel_ok"]
        py, px = part["py"][ok], part["px"][ok]
        image[py, px] = part["color"][ok] + part["final_t"][ok][:, None] * background
        blend_counts[py, px] = part["counts"][ok]
        final_t[py, px] = part["final_t"][ok]
        alpha_sum[py, px] = part["alpha_sum"][ok]
        contributors[part["tiles"]] = part["contributors"]
        slot_parts.append(part["slots"])
        hit_parts.append(part["hits"])
        weight_parts.append(part["weights"])

    n = gaussians.count
    slots = np.concatenate(slot_parts) if slot_parts else np.zeros(0, dtype=np.int64)
    owner = proj.gaussian_index[slots]
    hits = np.bincount(owner, weights=np.concatenate(hit_parts) if hit_parts else None, minlength=n)
    weights = np.bincount(owner, weights=np.concatenate(weight_parts) if weight_parts else None, minlength=n)
    if not slot_parts:
        hits, weights = np.zeros(n), np.zeros(n)

    return RenderOutput(
        image=image, blend_counts=blend_counts, per_gaussian_hits=np.rint(hits).astype(np.int64),
        final_transmittance=final_t, per_gaussian_weights=weights, alpha_sum=alpha_sum,
        background=background, t_saturation=t_saturation, projection=proj, bins=bins,
        tile_contributors=contributors,
    )


def render_image(
    gaussians: GaussianSet, cam: Camera, background: Sequence[float] = (0.0, 0.0, 0.0), active: Optional[np.ndarray] = None,
) -> np.ndarray:
    return np.clip(render_forward(gaussians, cam, background, active).image, 0.0, 1.0)


# Backward

def _backward_batch(proj: Projection, bins: TileBins, cam: Camera, tiles: np.ndarray, output: RenderOutput, d_image: np.ndarray) -> Dict[str, np.ndarray]:
    batch = _make_batch(tiles, bins, cam, depth_limit=output.tile_contributors[tiles])
    slots = batch.slots
    if slots.shape[1] == 0:
        return {"slots": np.zeros(0, dtype=np.int64)}

    alpha, g, dx, dy, unclamped = _alpha(proj, batch, slots)
    carry = np.ones((len(tiles), TILE_PIXELS))
    before, blended, _ = _blend_mask(alpha, carry, output.t_saturation)
    a_eff = np.where(blended, alpha, 0.0)
    weight = a_eff * before

    py = np.where(batch.pixel_ok, batch.py, 0)
    px = np.where(batch.pixel_ok, batch.px, 0)
    d_pixel = np.where(batch.pixel_ok[..., None], d_image[py, px], 0.0)           # (B, P, 3)
    final_t = np.where(batch.pixel_ok, output.final_transmittance[py, px], 0.0)   # (B, P)

    colors = proj.colors[np.maximum(slots, 0)]                                    # (B, K, 3)
    # dL/dC . c_i and the colour carried by everything behind slot i
    d_pc = np.einsum("bpc,bkc->bkp", d_pixel, colors)
    behind = np.cumsum((weight * d_pc)[:, ::-1], axis=1)[:, ::-1]
    behind = np.concatenate([behind[:, 1:], np.zeros_like(behind[:, :1])], axis=1)
    behind += (final_t * (d_pixel @ output.background))[:, None, :]

    d_alpha = np.where(blended, d_pc * before - behind / (1.0 - alpha), 0.0)
    opac = proj.opacities[np.maximum(slots, 0)][:, :, None]
    d_g = np.where(unclamped, d_alpha * opac, 0.0) * g

    live = slots >= 0
    a = proj.conic[np.maximum(slots, 0), 0][:, :, None]
    b = proj.conic[np.maximum(slots, 0), 1][:, :, None]
    c = proj.conic[np.maximum(slots, 0), 2][:, :, None]
    return {
        "slots": slots[live],
        "d_color": np.einsum("bkp,bpc->bkc", weight, d_pixel)[live],
        "d_opacity": np.where(unclamped, d_alpha * g, 0.0).sum(axis=2)[live],
        "d_mean2d": np.stack([(d_g * (a * dx + b * dy)).sum(axis=2), (d_g * (b * dx + c * dy)).sum(axis=2)], axis=-1)[live],
        "d_conic": np.stack([(-0.5 * d_g * dx * dx).sum(axis=2), (-d_g * dx * dy).sum(axis=2), (-0.5 * d_g * dy * dy).sum(axis=2)], axis=-1)[live],
    }


def _quaternion_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR through R(q / |q|) to the raw quaternion."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    d = d_rot
    dw = 2 * (-z * d[:, 0, 1] + y * d[:, 0, 2] + z * d[:, 1, 0] - x * d[:, 1, 2] - y * d[:, 2, 0] + x * d[:, 2, 1])
    dx = 2 * (y * d[:, 0, 1] + z * d[:, 0, 2] + y * d[:, 1, 0] - 2 * x * d[:, 1, 1] - w * d[:, 1, 2]
              + z * d[:, 2, 0] + w * d[:, 2, 1] - 2 * x * d[:, 2, 2])
    dy = 2 * (-2 * y * d[:, 0, 0] + x * d[:, 0, 1] + w * d[:, 0, 2] + x * d[:, 1, 0] + z * d[:, 1, 2]
              - w * d[:, 2, 0] + z * d[:, 2, 1] - 2 * y * d[:, 2, 2])
    dz = 2 * (-2 * z * d[:, 0, 0] - w * d[:, 0, 1] + x * d[:, 0, 2] + w * d[:, 1, 0] - 2 * z * d[:, 1, 1]
              + y * d[:, 1, 2] + x * d[:, 2, 0] + y * d[:, 2, 1])
    d_qn = np.stack([dw, dx, dy, dz], axis=1)
    return (d_qn - qn * (qn * d_qn).sum(axis=1, keepdims=True)) / norm


def render_backward(
    gaussians: GaussianSet,
    cam: Camera,
    output: RenderOutput,
    d_image: np.ndarray,
    threads: Optional[int] = None,
) -> GradientBuffer:
    """Gradients of a scalar loss whose image gradient is `d_image`."""
    if d_image.shape != output.image.shape or output.image.shape != (cam.height, cam.width, 3):
        raise ShapeMismatchError(
            f"d_image {d_image.shape} / image {output.image.shape} / camera {(cam.height, cam.width, 3)}"
        )
    proj, bins = output.projection, output.bins
    if proj.gaussian_index.size and proj.gaussian_index.max() >= gaussians.count:
        raise ShapeMismatchError("render output was produced for a larger primitive set")
    n = gaussians.count
    grads = GradientBuffer.zeros(n)
    m = len(proj)
    if m == 0:
        return grads

    def work(tiles: np.ndarray) -> Dict[str, np.ndarray]:
        return _backward_batch(proj, bins, cam, tiles, output, d_image)

    parts = [p for p in _run_batches(work, _batches(bins, cam), threads) if p["slots"].size]
    if not parts:
        return grads
    slots = np.concatenate([p["slots"] for p in parts])

    def gather(key: str, width: int) -> np.ndarray:
        values = np.concatenate([p[key] for p in parts]).reshape(len(slots), width)
        return np.stack([np.bincount(slots, weights=values[:, j], minlength=m) for j in range(width)], axis=1)

    d_color = gather("d_color", 3)
    d_opacity = gather("d_opacity", 1)[:, 0]
    d_mean2d = gather("d_mean2d", 2)
    d_conic = gather("d_conic", 3)

    # conic -> 2D covariance
    conic = np.empty((m, 2, 2))
    conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 0], conic[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    g_conic = np.empty((m, 2, 2))
    g_conic[:, 0, 0], g_conic[:, 1, 1] = d_conic[:, 0], d_conic[:, 2]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_cov2d = -conic @ g_conic @ conic

    # 2D covariance -> 3D covariance and the projection Jacobian
    w_rot = cam.rotation
    t = proj.jacobian @ w_rot
    d_cov3d = np.swapaxes(t, 1, 2) @ d_cov2d @ t
    d_t = 2.0 * d_cov2d @ t @ proj.cov3d
    d_j = d_t @ w_rot.T

    x, y, z = proj.points_cam[:, 0], proj.points_cam[:, 1], proj.points_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    d_cam = np.zeros((m, 3))
    d_cam[:, 0] = d_mean2d[:, 0] * fx / z - d_j[:, 0, 2] * fx / (z * z)
    d_cam[:, 1] = d_mean2d[:, 1] * fy / z - d_j[:, 1, 2] * fy / (z * z)
    d_cam[:, 2] = (
        -d_mean2d[:, 0] * fx * x / (z * z) - d_mean2d[:, 1] * fy * y / (z * z)
        - d_j[:, 0, 0] * fx / (z * z) + d_j[:, 0, 2] * 2 * fx * x / z ** 3
        - d_j[:, 1, 1] * fy / (z * z) + d_j[:, 1, 2] * 2 * fy * y / z ** 3
    )

    # 3D covariance -> log scales and rotation
    rows = proj.gaussian_index
    rot = quaternion_to_rotation(gaussians.rotations[rows])
    scales = np.exp(gaussians.log_scales[rows])
    m_mat = rot * scales[:, None, :]
    d_m = 2.0 * d_cov3d @ m_mat
    d_scale = (d_m * rot).sum(axis=1)
    d_rot = d_m * scales[:, None, :]

    opac = proj.opacities
    grads.d_means2d[rows] = d_mean2d
    grads.d_opacity[rows] = d_opacity
    grads.d_opacity_logit[rows] = d_opacity * opac * (1.0 - opac)
    grads.d_color[rows] = d_color
    grads.d_cov2d[rows] = d_cov2d
    grads.d_mean3d[rows] = d_cam @ w_rot
    grads.d_log_scale[rows] = d_scale * scales
    grads.d_rotation[rows] = _quaternion_backward(gaussians.rotations[rows], d_rot)
    return grads


# Closed forms for blend depth and the alpha gradient under saturation

def expected_grad_magnitude_oracle(
    mean_opacity: float, mean_g2d: float, c0: Sequence[float], c_bg: Sequence[float], t_saturation: float,
) -> np.ndarray:
    """E[dC/d alpha_m] = (c0 - c_bg) T_sat / (1 - E[o] E[G])."""
    mean_alpha = mean_opacity * mean_g2d
    denominator = 1.0 - mean_alpha
    if not 0.0 < mean_alpha < 1.0 or denominator <= 0.0:
        raise OracleDomainError(f"E[o]*E[G] must lie in (0, 1), got {mean_alpha}")
    return (np.asarray(c0, dtype=np.float64) - np.asarray(c_bg, dtype=np.float64)) * t_saturation / denominator


def expected_blend_depth_oracle(mean_opacity: float, mean_g2d: float, t_saturation: float) -> float:
    """Blend depth N solving (1 - E[o] E[G])^N = T_sat."""
    mean_alpha = mean_opacity * mean_g2d
    if not 0.0 < mean_alpha < 1.0:
        raise OracleDomainError(f"E[o]*E[G] must lie in (0, 1), got {mean_alpha}")
    if not 0.0 < t_saturation < 1.0:
        raise OracleDomainError(f"T_saturation must lie in (0, 1), got {t_saturation}")
    return math.log(t_saturation) / math.log1p(-mean_alpha)


# Image IO

def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(image: np.ndarray, path: Union[str, Path]) -> None:
    encoded = np.rint(linear_to_srgb(image) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(encoded, mode="RGB").save(str(path))
    except OSError as exc:
        raise ModelIOError(path, f"cannot write PNG ({exc})") from exc


def load_png(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(str(path)) as img:
            encoded = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ModelIOError(path, f"cannot read PNG ({exc})") from exc
    return srgb_to_linear(encoded)
