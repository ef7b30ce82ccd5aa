"""Pinhole cameras, depth bins and world-aligned voxel lattices.

Conventions: the world frame is right-handed with +Z up. Camera frames use
x right, y down, z forward; ``CameraPose.rotation`` maps camera-frame vectors
to world-frame vectors. Voxel indices are ordered ``(z, x, y)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def scaled(self, factor: float) -> "CameraPose":
        """Same camera with intrinsics rescaled for an image resized by ``factor``."""
        return replace(self, fx=self.fx * factor, fy=self.fy * factor,
                       cx=self.cx * factor, cy=self.cy * factor)

    def to_json(self) -> dict:
        return {"R": self.rotation.reshape(-1).tolist(), "t": self.translation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json(cls, d: dict) -> "CameraPose":
        return cls(np.asarray(d["R"], dtype=np.float64).reshape(3, 3), np.asarray(d["t"]),
                   float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def look_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """World-from-camera rotation for a camera facing ``yaw`` (radians from +X,
    counter-clockwise) and tilted down by ``pitch`` radians."""
    cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def pose_from_yaw(position: Sequence[float], yaw: float, pitch: float, fx: float, fy: float,
                  cx: float, cy: float) -> CameraPose:
    return CameraPose(look_rotation(yaw, pitch), np.asarray(position, dtype=np.float64),
                      fx, fy, cx, cy)


def camera_directions(pose: CameraPose, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z-component, shape ``(..., 3)``."""
    us, vs = np.broadcast_arrays(np.asarray(us, np.float64), np.asarray(vs, np.float64))
    return np.stack([(us - pose.cx) / pose.fx, (vs - pose.cy) / pose.fy, np.ones_like(us)], -1)


def ray_for_pixel(pose: CameraPose, pixel: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame origin and unit direction of the ray through ``pixel = (u, v)``."""
    d = pose.rotation @ camera_directions(pose, pixel[0], pixel[1])
    return pose.translation.copy(), d / np.linalg.norm(d)


def lift_pixel(pose: CameraPose, pixel: Tuple[float, float], depth: float) -> np.ndarray:
    """World point at ``depth`` meters along the optical axis through ``pixel``."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    d = camera_directions(pose, pixel[0], pixel[1])
    return pose.translation + depth * (pose.rotation @ d)


def lift_pixels(pose: CameraPose, us: np.ndarray, vs: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorised :func:`lift_pixel`; ``depths`` broadcasts against the pixels."""
    d = camera_directions(pose, us, vs) @ pose.rotation.T
    return pose.translation + np.asarray(depths, np.float64)[..., None] * d


def project_points(pose: CameraPose, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(..., 2)`` and optical-axis depth of world points."""
    cam = (np.asarray(points, np.float64) - pose.translation) @ pose.rotation
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([pose.fx * cam[..., 0] / z + pose.cx, pose.fy * cam[..., 1] / z + pose.cy], -1)
    return uv, z


@dataclass(frozen=True)
class GridSpec:
    dims: Tuple[int, int, int]
    voxel_size: Tuple[float, float, float]
    origin: Tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if min(self.dims) <= 0 or min(self.voxel_size) <= 0:
            raise ValueError("grid dims and voxel sizes must be positive")

    @property
    def extent(self) -> Tuple[float, float, float]:
        """Metric extent per ``(z, x, y)`` axis."""
        return tuple(d * s for d, s in zip(self.dims, self.voxel_size))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def world_axes(self) -> np.ndarray:
        """Permutation from ``(z, x, y)`` index order to world ``(x, y, z)`` columns."""
        return np.array([2, 0, 1])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """World points ``(..., 3)`` to continuous ``(z, x, y)`` voxel units."""
        p = np.asarray(points, np.float64)[..., self.world_axes()]
        return (p - np.array(self.origin)) / np.array(self.voxel_size)

    def voxel_centers(self) -> np.ndarray:
        """World positions of all voxel centers, shape ``(Z, X, Y, 3)``."""
        iz, ix, iy = np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij")
        loc = np.stack([iz, ix, iy], -1) + 0.5
        zxy = np.array(self.origin) + loc * np.array(self.voxel_size)
        return zxy[..., [1, 2, 0]]

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "voxel_size": list(self.voxel_size),
                "origin": list(self.origin)}

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["dims"]), tuple(d["voxel_size"]), tuple(d["origin"]))


def centered_grid(dims, voxel_size, ground: float = 0.0) -> GridSpec:
    """Grid centred horizontally on the world origin, bottom face at ``ground``.

    ``origin`` is stored in ``(z, x, y)`` order like every other GridSpec field.
    """
    z, x, y = dims
    sz, sx, sy = voxel_size
    return GridSpec(dims, voxel_size, (ground, -x * sx / 2, -y * sy / 2))


def world_to_voxel(point, spec: GridSpec) -> Optional[Tuple[int, int, int]]:
    """Index of the voxel containing ``point``, or ``None`` outside the grid.

    Points on an interior boundary belong to the upper voxel under the floor
    rule; points on the grid's max faces are outside.
    """
    idx = world_to_voxel_many(np.asarray(point, np.float64)[None], spec)[0]
    return None if idx[0] < 0 else tuple(int(i) for i in idx)


def world_to_voxel_many(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Vectorised :func:`world_to_voxel`; invalid rows are ``(-1, -1, -1)``."""
    loc = np.floor(spec.to_local(points)).astype(np.int64)
    inside = np.all((loc >= 0) & (loc < np.array(spec.dims)), axis=-1)
    loc[~inside] = -1
    return loc


def flat_voxel_index(idx: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Row-major flat index for ``(z, x, y)`` triples; -1 stays -1."""
    z, x, y = spec.dims
    flat = (idx[..., 0] * x + idx[..., 1]) * y + idx[..., 2]
    return np.where(idx[..., 0] < 0, -1, flat)


@dataclass(frozen=True)
class DepthBins:
    depths: np.ndarray
    deltas: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.asarray(self.depths, np.float64)
        if d.ndim != 1 or len(d) < 1 or np.any(d <= 0) or np.any(np.diff(d) <= 0):
            raise ValueError("depths must be positive and strictly increasing")
        object.__setattr__(self, "depths", d)
        if self.deltas is None:
            delta = np.diff(d)
            delta = np.append(delta, delta[-1] if len(delta) else 1.0)
            object.__setattr__(self, "deltas", delta)
        else:
            object.__setattr__(self, "deltas", np.asarray(self.deltas, np.float64))

    @classmethod
    def uniform(cls, near: float, far: float, n: int) -> "DepthBins":
        return cls(np.linspace(near, far, n))

    def __len__(self):
        return len(self.depths)


def save_poses(path, poses: Sequence[CameraPose]) -> None:
    with open(path, "w") as fh:
        json.dump([p.to_json() for p in poses], fh)


def load_poses(path) -> list:
    with open(path) as fh:
        return [CameraPose.from_json(d) for d in json.load(fh)]
