"""Scan representation, file ingestion and preprocessing.

A scan is held as an ``(N, 3)`` float64 coordinate array plus an ``(N,)``
intensity array. Arrays are frozen on construction so clouds can be shared
between threads without copying.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class MalformedFileError(ValueError):
    """A scan or pose file does not follow its declared layout."""


class DegenerateAlignmentError(ValueError):
    """PCA heading alignment is undefined for this cloud."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    xyz: np.ndarray
    intensity: np.ndarray = None
    frame_id: int = 0

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.intensity is None:
            inten = np.zeros(len(xyz))
        else:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(inten) != len(xyz):
            raise ValueError("intensity length does not match point count")
        if not (np.isfinite(xyz).all() and np.isfinite(inten).all()):
            raise ValueError("point cloud contains non-finite values")
        if self.frame_id < 0:
            raise ValueError("frame_id must be non-negative")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(inten))

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.xyz[mask], self.intensity[mask], self.frame_id)

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(xyz, self.intensity, self.frame_id)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def from_yaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.array([x, y, z]))

    def as_row(self) -> np.ndarray:
        """Row-major 3x4 ``[R|t]`` flattened to 12 values."""
        return np.hstack([self.rotation, self.translation[:, None]]).reshape(12)


# ---------------------------------------------------------------------------
# I/O

def load_kitti_bin(path) -> PointCloud:
    """Read a KITTI velodyne scan: packed little-endian float32 (x, y, z, i)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16 != 0:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(data[:, :3], data[:, 3])


def write_kitti_bin(cloud: PointCloud, path) -> None:
    data = np.empty((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.xyz
    data[:, 3] = cloud.intensity
    _atomic_write_bytes(Path(path), data.tobytes())


def load_poses(path) -> list[Pose]:
    """Read a KITTI odometry pose file (12 numbers per line, row-major 3x4)."""
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise MalformedFileError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
            try:
                m = np.array([float(t) for t in tokens]).reshape(3, 4)
            except ValueError as exc:
                raise MalformedFileError(f"{path}:{lineno}: {exc}") from None
            poses.append(Pose(m[:, :3], m[:, 3]))
    return poses


def write_poses(poses: Sequence[Pose], path) -> None:
    lines = [" ".join(repr(float(v)) for v in p.as_row()) for p in poses]
    _atomic_write_bytes(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode())


def load_csv_scan(path) -> PointCloud:
    """Read a scan from CSV with header ``x,y,z[,intensity]``."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise MalformedFileError(f"{path}: missing header") from None
        if header[:3] != ["x", "y", "z"] or len(header) > 4 or (len(header) == 4 and header[3] != "intensity"):
            raise MalformedFileError(f"{path}: header must be x,y,z[,intensity], got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedFileError(f"{path}:{lineno}: expected {len(header)} columns")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise MalformedFileError(f"{path}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    inten = data[:, 3] if len(header) == 4 else None
    return PointCloud(data[:, :3], inten)


def load_scan(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv_scan(path)
    return load_kitti_bin(path)


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# preprocessing

def planar_range(xyz: np.ndarray) -> np.ndarray:
    return np.hypot(xyz[:, 0], xyz[:, 1])


def range_filter(cloud: PointCloud, max_range: float) -> PointCloud:
    """Keep points whose planar distance from the sensor is <= max_range."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    keep = planar_range(cloud.xyz) <= max_range
    if keep.all():
        return cloud
    return cloud.subset(keep)


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Replace the points of every occupied origin-anchored cube by their centroid.

    Output order is ascending lexicographic cube index ``(ix, iy, iz)``.
    """
    if leaf <= 0:
        raise ValueError("leaf must be positive")
    n = len(cloud)
    if n == 0:
        return cloud
    idx = np.floor(cloud.xyz / leaf).astype(np.int64)
    idx -= idx.min(axis=0)
    span = idx.max(axis=0) + 1
    # Flat code preserves lexicographic order of (ix, iy, iz).
    code = (idx[:, 0] * span[1] + idx[:, 1]) * span[2] + idx[:, 2]
    _, inverse, counts = np.unique(code, return_inverse=True, return_counts=True)
    m = len(counts)
    out = np.empty((m, 3))
    for k in range(3):
        out[:, k] = np.bincount(inverse, weights=cloud.xyz[:, k], minlength=m) / counts
    inten = np.bincount(inverse, weights=cloud.intensity, minlength=m) / counts
    return PointCloud(out, inten, cloud.frame_id)


def yaw_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    """Rotate every point counter-clockwise about the z-axis by ``angle`` radians."""
    return cloud.with_xyz(cloud.xyz @ yaw_matrix(angle).T)


def _sign_fix(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] > 0 else -v


def pca_heading(xy: np.ndarray) -> np.ndarray:
    """2x2 rotation whose rows are the planar principal directions."""
    if len(xy) < 3:
        raise DegenerateAlignmentError("PCA alignment needs at least 3 points")
    cov = np.cov(xy, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    lmin, lmax = evals
    if lmax <= 0 or abs(lmin / lmax - 1.0) <= 1e-9:
        raise DegenerateAlignmentError("planar spread is isotropic or empty")
    e1 = _sign_fix(evecs[:, 1])
    e2 = _sign_fix(evecs[:, 0])
    rot = np.vstack([e1, e2])
    if np.linalg.det(rot) < 0:
        rot[1] = -rot[1]
    return rot


def pca_align(cloud: PointCloud) -> PointCloud:
    """Yaw the cloud so its first planar principal axis is +x and the second +y."""
    rot2 = pca_heading(cloud.xyz[:, :2])
    xyz = cloud.xyz.copy()
    xyz[:, :2] = cloud.xyz[:, :2] @ rot2.T
    return cloud.with_xyz(xyz)
