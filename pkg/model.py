"""
Gaussian primitives, cameras and the raw <-> activated parameterisation.

Parameters are stored raw (what the optimiser updates): opacity as a logit,
scale as a log, rotation as a (not necessarily unit) quaternion w, x, y, z.
Colours are degree-0 RGB in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import typing

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.special import expit, logit

from errors import ModelIOError, NonFiniteParameterError, ShapeMismatchError
from utils import MB_SIZE, get_object_size_mb

if typing.TYPE_CHECKING:
    from typing import *


PARAM_NAMES = ("means", "log_scales", "rotations", "opacity_logits", "colors")
PARAM_WIDTHS = {"means": 3, "log_scales": 3, "rotations": 4, "opacity_logits": 1, "colors": 3}

# degree-0 spherical harmonic constant, used only for 3DGS-compatible PLY files
SH_C0 = 0.28209479177387814

PLY_PROPERTIES = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
PLY_ROW_BYTES = 4 * len(PLY_PROPERTIES)

_NPY_DTYPE = np.dtype(
    [("means", "<f8", (3,)), ("log_scales", "<f8", (3,)), ("rotations", "<f8", (4,)),
     ("opacity_logits", "<f8"), ("colors", "<f8", (3,))]
)


@dataclass
class GaussianSet:
    """Structure-of-arrays store of every primitive parameter."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.validate()

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls) -> GaussianSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    def validate(self) -> None:
        lengths = {name: getattr(self, name).shape[0] for name in PARAM_NAMES}
        if len(set(lengths.values())) > 1:
            raise ShapeMismatchError(f"parallel arrays differ in length: {lengths}")

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> GaussianSet:
        return GaussianSet(**{name: arr.copy() for name, arr in self.params().items()})

    def take(self, indices: np.ndarray) -> GaussianSet:
        indices = np.asarray(indices, dtype=np.int64)
        return GaussianSet(**{name: arr[indices] for name, arr in self.params().items()})

    def concat(self, other: GaussianSet) -> GaussianSet:
        return GaussianSet(
            **{name: np.concatenate([arr, getattr(other, name)]) for name, arr in self.params().items()}
        )

    def check_finite(self, indices: Optional[np.ndarray] = None) -> None:
        """Raise NonFiniteParameterError naming the first bad primitive."""
        for name, arr in self.params().items():
            view = arr if indices is None else arr[indices]
            if view.shape[0] == 0:
                continue
            bad = ~np.isfinite(view.reshape(view.shape[0], -1)).all(axis=1)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise NonFiniteParameterError(name, row if indices is None else int(indices[row]))


@dataclass(frozen=True)
class Activated:
    opacities: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; world_to_cam maps x_cam = R @ x_world + t (OpenCV axes)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"resolution must be >= 1, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.width, self.height

    @classmethod
    def look_at(
        cls, eye: Sequence[float], target: Sequence[float], up: Sequence[float],
        width: int, height: int, fx: float, fy: Optional[float] = None,
    ) -> Camera:
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls(
            fx=fx, fy=fy if fy is not None else fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=width, height=height, rotation=rotation, translation=-rotation @ eye,
        )


def activate(raw: GaussianSet, indices: Optional[np.ndarray] = None) -> Activated:
    """Sigmoid opacities, exponential scales and unit rotations, of every row or of `indices`."""
    rows = slice(None) if indices is None else np.asarray(indices, dtype=np.int64)
    raw.check_finite(None if indices is None else rows)
    rotations = raw.rotations[rows]
    norms = np.linalg.norm(rotations, axis=1)
    if (norms <= 0).any():
        bad = int(np.flatnonzero(norms <= 0)[0])
        raise NonFiniteParameterError("rotations", bad if indices is None else int(rows[bad]))
    return Activated(
        opacities=expit(raw.opacity_logits[rows]),
        scales=np.exp(raw.log_scales[rows]),
        rotations=rotations / norms[:, None] if norms.size else rotations.copy(),
    )


def deactivate(opacity: Union[float, np.ndarray], scale: Union[float, np.ndarray]) -> Tuple[Union[float, np.ndarray], Union[float, np.ndarray]]:
    """Inverse of activate for opacity and scale: (logit, log_scale)."""
    return deactivate_opacity(opacity), deactivate_scale(scale)


def deactivate_opacity(opacity: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    return logit(opacity)


def deactivate_scale(scale: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    return np.log(scale)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norms <= 0).any():
        raise ValueError("zero-norm quaternion")
    return q / norms


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); normalises first."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed unit quaternions."""
    return normalize_quaternions(rng.normal(size=(n, 4)))


def build_covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Vectorised Sigma = R diag(exp(log_scale))^2 R^T, shape (n, 3, 3)."""
    rot = quaternion_to_rotation(rotations)
    m = rot * np.exp(log_scales)[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def build_covariance(log_scale: Sequence[float], rotation: Sequence[float]) -> np.ndarray:
    return build_covariances(np.asarray(log_scale, dtype=np.float64)[None], np.asarray(rotation, dtype=np.float64)[None])[0]


def volume(log_scale: np.ndarray) -> Union[float, np.ndarray]:
    """Product of activated scales; the constant 4/3 pi is left out."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    return np.prod(np.exp(log_scale), axis=-1)


def scene_extent(means: np.ndarray) -> float:
    """Radius of the bounding sphere (centred on the bounding-box centre) of the means."""
    if len(means) == 0:
        return 1.0
    center = 0.5 * (means.min(axis=0) + means.max(axis=0))
    radius = float(np.linalg.norm(means - center, axis=1).max())
    return radius if radius > 0 else 1.0


# IO

def save_model(gaussians: GaussianSet, path: Union[str, Path]) -> None:
    """Lossless float64 checkpoint; the bytes depend on the parameters only."""
    rows = np.empty(gaussians.count, dtype=_NPY_DTYPE)
    for name in PARAM_NAMES:
        rows[name] = getattr(gaussians, name)
    try:
        with open(path, "wb") as handle:
            np.save(handle, rows, allow_pickle=False)
    except OSError as exc:
        raise ModelIOError(path, f"cannot write model ({exc.strerror})") from exc


def load_model(path: Union[str, Path]) -> GaussianSet:
    try:
        rows = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ModelIOError(path, f"cannot read model ({exc})") from exc
    if rows.dtype != _NPY_DTYPE:
        raise ModelIOError(path, f"unexpected record layout {rows.dtype}")
    return GaussianSet(**{name: np.array(rows[name]) for name in PARAM_NAMES})


def save_ply(gaussians: GaussianSet, path: Union[str, Path]) -> None:
    attributes = np.concatenate(
        [
            gaussians.means,
            (gaussians.colors - 0.5) / SH_C0,
            gaussians.opacity_logits[:, None],
            gaussians.log_scales,
            gaussians.rotations,
        ],
        axis=1,
    ).astype(np.float32)
    elements = np.empty(gaussians.count, dtype=[(name, "<f4") for name in PLY_PROPERTIES])
    for column, name in enumerate(PLY_PROPERTIES):
        elements[name] = attributes[:, column]
    try:
        PlyData([PlyElement.describe(elements, "vertex")], text=False, byte_order="<").write(str(path))
    except OSError as exc:
        raise ModelIOError(path, f"cannot write PLY ({exc.strerror})") from exc


def load_ply(path: Union[str, Path]) -> GaussianSet:
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (OSError, KeyError, ValueError) as exc:
        raise ModelIOError(path, f"cannot read PLY ({exc})") from exc
    missing = [name for name in PLY_PROPERTIES if name not in vertex.data.dtype.names]
    if missing:
        raise ModelIOError(path, f"missing properties {missing}")

    def columns(*names: str) -> np.ndarray:
        return np.stack([np.asarray(vertex[name], dtype=np.float64) for name in names], axis=1)

    return GaussianSet(
        means=columns("x", "y", "z"),
        log_scales=columns("scale_0", "scale_1", "scale_2"),
        rotations=columns("rot_0", "rot_1", "rot_2", "rot_3"),
        opacity_logits=np.asarray(vertex["opacity"], dtype=np.float64),
        colors=0.5 + SH_C0 * columns("f_dc_0", "f_dc_1", "f_dc_2"),
    )


def model_size_mb(gaussians: GaussianSet) -> float:
    """Size of the PLY payload, the usual "model size" figure."""
    return gaussians.count * PLY_ROW_BYTES / MB_SIZE


def memory_footprint_mb(gaussians: GaussianSet, *states: Any) -> float:
    """In-memory footprint of the parameters plus any attached optimiser/densify state."""
    return get_object_size_mb((gaussians,) + states)
