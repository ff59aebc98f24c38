"""Deterministic synthetic scenes, trajectories and scans with planted loops.

Random draws come from numpy's PCG64 bit generator (``numpy.random.default_rng``),
whose stream is fixed by its published algorithm and independent of platform.
Per-frame noise uses the seed sequence ``[scene seed, frame index]`` so frames
can be rendered in any order or in parallel.

Scans are produced by range-culling a fixed, pre-sampled world point set; no
occlusion is modelled.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import GroundTruth, GroundTruthConfig, label_ground_truth
from .pointcloud import PointCloud, Pose, _atomic_write_bytes, write_kitti_bin, write_poses


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 7
    area: float = 400.0
    num_structures: int = 160
    points_per_scan: int = 40000
    noise_sigma: float = 0.05
    max_range: float = 80.0
    sensor_height: float = 1.7
    ground_density: float = 0.3
    surface_density: float = 1.5

    def __post_init__(self):
        if self.area <= 0 or self.points_per_scan <= 0 or self.max_range <= 0:
            raise ValueError("area, points_per_scan and max_range must be positive")
        if self.num_structures < 0 or self.noise_sigma < 0:
            raise ValueError("num_structures and noise_sigma must be non-negative")


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box" | "cylinder" | "wall"
    x: float
    y: float
    size_a: float  # box width / cylinder radius / wall length
    size_b: float  # box depth / unused / wall thickness
    height: float
    yaw: float


@dataclass
class World:
    primitives: list[Primitive]
    points: np.ndarray  # (M, 3) surface samples, world frame
    spec: SceneSpec


@dataclass(frozen=True)
class RevisitSegment:
    start: int  # first original frame
    stop: int  # one past the last original frame
    yaw_offset_deg: float  # 0 same direction, 180 reverse


@dataclass
class TrajectorySpec:
    waypoints: list[tuple[float, float, float]]  # (x, y, yaw) per frame
    revisit_segments: list[RevisitSegment] = field(default_factory=list)

    def poses(self) -> list[Pose]:
        return [Pose.from_yaw(x, y, yaw) for x, y, yaw in self.waypoints]


@dataclass
class SyntheticSequence:
    scans: list[PointCloud]
    poses: list[Pose]
    truth: GroundTruth
    trajectory: TrajectorySpec


# ---------------------------------------------------------------------------
# scene

def _clear_of(x, y, r, keep_clear: np.ndarray | None, margin: float) -> bool:
    if keep_clear is None or len(keep_clear) == 0:
        return True
    d = np.hypot(keep_clear[:, 0] - x, keep_clear[:, 1] - y)
    return bool(d.min() > r + margin)


def generate_scene(spec: SceneSpec, keep_clear: Sequence[tuple[float, float]] | None = None, clearance: float = 4.0) -> World:
    """Place ground plus random boxes, cylinders and walls; sample their surfaces.

    ``keep_clear`` lists planar positions (e.g. a trajectory) that no
    structure may come within ``clearance`` meters of.
    """
    rng = np.random.default_rng(spec.seed)
    half = spec.area / 2.0
    clear = None if keep_clear is None else np.asarray(keep_clear, dtype=np.float64)[:, :2]

    prims: list[Primitive] = []
    attempts = 0
    while len(prims) < spec.num_structures and attempts < 50 * max(spec.num_structures, 1):
        attempts += 1
        kind = ("box", "box", "cylinder", "wall")[rng.integers(4)]
        x, y = rng.uniform(-half, half, size=2)
        yaw = rng.uniform(0.0, math.pi)
        if kind == "box":
            a, b = rng.uniform(4.0, 25.0), rng.uniform(4.0, 15.0)
            h = rng.uniform(3.0, 20.0)
            extent = 0.5 * math.hypot(a, b)
        elif kind == "cylinder":
            a, b = rng.uniform(0.3, 2.5), 0.0
            h = rng.uniform(2.0, 12.0)
            extent = a
        else:
            a, b = rng.uniform(8.0, 40.0), 0.3
            h = rng.uniform(1.0, 4.0)
            extent = a / 2.0
        if not _clear_of(x, y, extent, clear, clearance):
            continue
        prims.append(Primitive(kind, float(x), float(y), float(a), float(b), float(h), float(yaw)))

    parts = [_sample_ground(rng, spec)]
    parts += [_sample_primitive(rng, p, spec.surface_density) for p in prims]
    return World(prims, np.concatenate(parts, axis=0), spec)


def _count(rng, area: float, density: float) -> int:
    return int(rng.poisson(area * density))


def _sample_ground(rng, spec: SceneSpec) -> np.ndarray:
    half = spec.area / 2.0
    n = _count(rng, spec.area**2, spec.ground_density)
    xy = rng.uniform(-half, half, size=(n, 2))
    return np.column_stack([xy, np.zeros(n)])


def _rect_faces(rng, p: Primitive, density: float) -> np.ndarray:
    """Side faces and roof of an oriented box (walls are thin boxes)."""
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    hw, hd = p.size_a / 2.0, p.size_b / 2.0
    pts = []
    # Four vertical faces: (axis-aligned local coordinates before rotation).
    for length, fixed, along_x in ((p.size_a, hd, True), (p.size_a, -hd, True), (p.size_b, hw, False), (p.size_b, -hw, False)):
        n = _count(rng, length * p.height, density)
        u = rng.uniform(-length / 2.0, length / 2.0, n)
        z = rng.uniform(0.0, p.height, n)
        lx, ly = (u, np.full(n, fixed)) if along_x else (np.full(n, fixed), u)
        pts.append(np.column_stack([lx, ly, z]))
    n = _count(rng, p.size_a * p.size_b, density)
    pts.append(np.column_stack([rng.uniform(-hw, hw, n), rng.uniform(-hd, hd, n), np.full(n, p.height)]))
    local = np.concatenate(pts, axis=0)
    x = p.x + c * local[:, 0] - s * local[:, 1]
    y = p.y + s * local[:, 0] + c * local[:, 1]
    return np.column_stack([x, y, local[:, 2]])


def _sample_primitive(rng, p: Primitive, density: float) -> np.ndarray:
    if p.kind in ("box", "wall"):
        return _rect_faces(rng, p, density)
    r = p.size_a
    n = _count(rng, 2 * math.pi * r * p.height, density)
    phi = rng.uniform(0.0, 2 * math.pi, n)
    z = rng.uniform(0.0, p.height, n)
    side = np.column_stack([p.x + r * np.cos(phi), p.y + r * np.sin(phi), z])
    n = _count(rng, math.pi * r * r, density)
    rr = r * np.sqrt(rng.uniform(0.0, 1.0, n))
    phi = rng.uniform(0.0, 2 * math.pi, n)
    top = np.column_stack([p.x + rr * np.cos(phi), p.y + rr * np.sin(phi), np.full(n, p.height)])
    return np.concatenate([side, top], axis=0)


# ---------------------------------------------------------------------------
# rendering

def render_scan(world: World, pose: Pose, spec: SceneSpec | None = None, frame_index: int = 0) -> PointCloud:
    """Points within range of the sensor, in the sensor frame, with Gaussian noise."""
    spec = spec or world.spec
    t = pose.translation
    d = np.hypot(world.points[:, 0] - t[0], world.points[:, 1] - t[1])
    sel = np.flatnonzero(d <= spec.max_range)
    if len(sel) > spec.points_per_scan:
        keep = np.linspace(0, len(sel) - 1, spec.points_per_scan).round().astype(np.int64)
        sel = sel[keep]
    origin = np.array([t[0], t[1], t[2] + spec.sensor_height])
    xyz = (world.points[sel] - origin) @ pose.rotation
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, frame_index])
        xyz = xyz + rng.normal(0.0, spec.noise_sigma, size=xyz.shape)
    return PointCloud(xyz, None, frame_index)


# ---------------------------------------------------------------------------
# trajectories

def loop_trajectory(
    num_frames: int = 200,
    num_revisits: int = 30,
    step: float = 2.0,
    revisit: str = "reverse",
    lateral_offset: float = 2.0,
    jitter: float = 0.3,
    yaw_jitter_deg: float = 2.0,
    arc_deg: float = 300.0,
    seed: int = 0,
) -> TrajectorySpec:
    """An open arc followed by a revisit of its first ``num_revisits`` frames.

    ``revisit`` is ``"reverse"`` (opposite heading, frames visited backwards),
    ``"same"`` (same heading and order), ``"arbitrary"`` (random heading) or
    ``"none"`` (keep following the arc; no planted loops).
    """
    if revisit not in ("reverse", "same", "arbitrary", "none"):
        raise ValueError(f"unknown revisit mode {revisit!r}")
    rng = np.random.default_rng([seed, 0x5EED])
    n_rev = 0 if revisit == "none" else num_revisits
    n_main = num_frames - n_rev
    if n_main <= n_rev:
        raise ValueError("trajectory too short for the requested revisits")
    arc = math.radians(arc_deg)
    radius = n_main * step / arc
    wps = []
    for i in range(n_main):
        a = -math.pi / 2 + i * step / radius
        wps.append((radius * math.cos(a), radius * math.sin(a), a + math.pi / 2))

    segments = []
    if n_rev:
        order = range(n_rev - 1, -1, -1) if revisit == "reverse" else range(n_rev)
        for j in order:
            x, y, yaw = wps[j]
            # Drive on the neighbouring lane, to the left of the original heading.
            ox, oy = -math.sin(yaw) * lateral_offset, math.cos(yaw) * lateral_offset
            jx, jy = rng.normal(0.0, jitter, 2)
            if revisit == "reverse":
                ryaw = yaw + math.pi
            elif revisit == "same":
                ryaw = yaw
            else:
                ryaw = yaw + rng.uniform(0.0, 2 * math.pi)
            ryaw += math.radians(rng.normal(0.0, yaw_jitter_deg))
            wps.append((x + ox + jx, y + oy + jy, math.remainder(ryaw, 2 * math.pi)))
        offset = {"reverse": 180.0, "same": 0.0, "arbitrary": float("nan")}[revisit]
        segments.append(RevisitSegment(0, n_rev, offset))
    return TrajectorySpec(wps, segments)


def planted_loop_sequence(
    scene: SceneSpec | None = None,
    traj: TrajectorySpec | None = None,
    gt_cfg: GroundTruthConfig | None = None,
    world: World | None = None,
) -> SyntheticSequence:
    """Render every trajectory pose and label loop-closure ground truth."""
    scene = scene or SceneSpec()
    traj = traj or loop_trajectory()
    if world is None:
        world = generate_scene(scene, keep_clear=[w[:2] for w in traj.waypoints])
    poses = traj.poses()
    scans = [render_scan(world, p, scene, i) for i, p in enumerate(poses)]
    truth = label_ground_truth(poses, gt_cfg or GroundTruthConfig())
    return SyntheticSequence(scans, poses, truth, traj)


def export_kitti(seq: SyntheticSequence, out_dir) -> Path:
    """Write ``velodyne/NNNNNN.bin``, ``poses.txt`` and ``truth.json``."""
    out = Path(out_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    for i, scan in enumerate(seq.scans):
        write_kitti_bin(scan, out / "velodyne" / f"{i:06d}.bin")
    write_poses(seq.poses, out / "poses.txt")
    truth = {
        "has_true_loop": [bool(v) for v in seq.truth.has_true_loop],
        "true_matches": {str(q): sorted(int(m) for m in ms) for q, ms in enumerate(seq.truth.true_matches) if ms},
        "revisit_segments": [
            {
                "start": s.start,
                "stop": s.stop,
                "yaw_offset_deg": None if math.isnan(s.yaw_offset_deg) else s.yaw_offset_deg,
                "direction": _direction(s.yaw_offset_deg),
            }
            for s in seq.trajectory.revisit_segments
        ],
        "config": asdict(seq.truth.config),
    }
    _atomic_write_bytes(out / "truth.json", json.dumps(truth, indent=1, sort_keys=True).encode())
    return out


def _direction(yaw_offset_deg: float) -> str:
    if math.isnan(yaw_offset_deg):
        return "arbitrary"
    return "reverse" if abs(math.remainder(yaw_offset_deg, 360.0)) > 90.0 else "same"
