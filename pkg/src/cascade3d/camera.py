"""Pinhole camera model, depth-map unprojection and the ground-height feature.

Pixel convention: continuous coordinates ``(u, v)`` with the centre of the
raster cell at column ``j``/row ``i`` sitting at ``(j + 0.5, i + 0.5)``.
``floor`` maps a continuous coordinate back to its cell; this is the only
place sub-pixel positions are discretised.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BehindCamera(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``p_cam = R @ p_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def looking_forward(cls, height: float, pitch: float) -> "Pose":
        """Camera at ``(0, 0, height)`` looking along world +y, tilted down by
        ``pitch`` radians (camera x right, y down, z forward)."""
        s, c = np.sin(pitch), np.cos(pitch)
        rot = np.array([[1.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
        position = np.array([0.0, 0.0, height])
        return cls(rot, -rot @ position)

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self`` applied after ``other``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def world_to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def camera_to_world(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation


@dataclass
class PointCloud:
    """Points with optional per-point source pixel ``(row, col)`` (-1 if none)."""

    xyz: np.ndarray
    pixel: np.ndarray | None = None
    depth: np.ndarray | None = None  # camera depth at capture time
    height: np.ndarray | None = None
    features: np.ndarray | None = None  # appended channels, e.g. painted scores
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, idx) -> "PointCloud":
        def take(a):
            return None if a is None else a[idx]

        return PointCloud(self.xyz[idx], take(self.pixel), take(self.depth), take(self.height),
                          take(self.features))


def project_points(K: Intrinsics, T: Pose, points_world):
    """Vectorised projection. Returns ``(uv, depth, in_frame)``; no checks."""
    pc = T.world_to_camera(points_world)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[..., 0] / z + K.cx
        v = K.fy * pc[..., 1] / z + K.cy
    uv = np.stack([u, v], axis=-1)
    in_frame = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return uv, z, in_frame


def project(K: Intrinsics, T: Pose, p_world):
    """Project one world point. Returns ``(u, v, depth, out_of_frame)``.

    Raises:
        BehindCamera: if the camera-frame depth is not positive.
    """
    uv, z, in_frame = project_points(K, T, np.asarray(p_world, dtype=float))
    if not z > 0:
        raise BehindCamera(f"point at camera depth {float(z)}")
    return float(uv[0]), float(uv[1]), float(z), not bool(in_frame)


def unproject_points(K: Intrinsics, T: Pose, u, v, depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    x = (np.asarray(u, dtype=float) - K.cx) / K.fx * depth
    y = (np.asarray(v, dtype=float) - K.cy) / K.fy * depth
    return T.camera_to_world(np.stack([x, y, depth], axis=-1))


def unproject(K: Intrinsics, T: Pose, u: float, v: float, depth: float) -> np.ndarray:
    return unproject_points(K, T, u, v, depth)


def pixel_centers(height: int, width: int):
    rows, cols = np.mgrid[0:height, 0:width]
    return rows, cols, cols + 0.5, rows + 0.5


def depth_to_cloud(depth_map, K: Intrinsics, T: Pose) -> PointCloud:
    """One point per pixel with a finite positive depth (NaN marks absence)."""
    depth_map = np.asarray(depth_map, dtype=float)
    valid = np.isfinite(depth_map) & (depth_map > 0)
    rows, cols = np.nonzero(valid)
    d = depth_map[rows, cols]
    if len(d) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    xyz = unproject_points(K, T, cols + 0.5, rows + 0.5, d)
    return PointCloud(xyz, np.stack([rows, cols], axis=1).astype(np.int64), d)


def pixel_of(uv, K: Intrinsics) -> np.ndarray:
    """Raster cell (row, col) for continuous coordinates; -1 outside frame."""
    uv = np.asarray(uv, dtype=float)
    col = np.floor(uv[..., 0])
    row = np.floor(uv[..., 1])
    ok = np.isfinite(col) & np.isfinite(row) & (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    out = np.full(uv.shape[:-1] + (2,), -1, dtype=np.int64)
    out[ok, 0] = row[ok].astype(np.int64)
    out[ok, 1] = col[ok].astype(np.int64)
    return out


def ground_level(z, percentile: float = 1.0) -> float:
    """Nearest-rank percentile of heights."""
    z = np.sort(np.asarray(z, dtype=float).ravel())
    if len(z) == 0:
        raise ValueError("empty cloud has no ground level")
    rank = max(1, int(np.ceil(percentile * len(z) / 100.0)))
    return float(z[rank - 1])


def height_feature(cloud, percentile: float = 1.0) -> np.ndarray:
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    return xyz[:, 2] - ground_level(xyz[:, 2], percentile)
