import json
import math

import numpy as np
import pytest

from ndd.descriptor import DescriptorConfig, build_descriptor
from ndd.pointcloud import Pose, load_kitti_bin, load_poses
from ndd.retrieval import DescriptorDatabase, best_shift, detect_loop
from ndd.descriptor import align_key
from ndd.synthbench import (
    SceneSpec,
    export_kitti,
    generate_scene,
    loop_trajectory,
    planted_loop_sequence,
    render_scan,
)


class TestScene:
    def test_deterministic(self):
        a = generate_scene(SceneSpec(seed=11, num_structures=20))
        b = generate_scene(SceneSpec(seed=11, num_structures=20))
        assert a.primitives == b.primitives
        assert np.array_equal(a.points, b.points)

    def test_ground_only(self):
        w = generate_scene(SceneSpec(num_structures=0))
        assert w.primitives == [] and np.all(w.points[:, 2] == 0)

    def test_seed_changes_arrangement(self):
        a = generate_scene(SceneSpec(seed=1, num_structures=10))
        b = generate_scene(SceneSpec(seed=2, num_structures=10))
        assert a.primitives != b.primitives

    def test_keep_clear(self):
        path = [(float(x), 0.0) for x in range(-100, 100, 2)]
        w = generate_scene(SceneSpec(num_structures=50), keep_clear=path, clearance=4.0)
        for p in w.primitives:
            assert min(math.hypot(p.x - x, p.y - y) for x, y in path) > 4.0


class TestRender:
    def test_noise_free_repeatable(self, small_world):
        spec = SceneSpec(seed=3, noise_sigma=0.0, points_per_scan=8000)
        pose = Pose.from_yaw(5.0, -3.0, 0.4)
        a = render_scan(small_world, pose, spec, 0)
        b = render_scan(small_world, pose, spec, 0)
        assert np.array_equal(a.xyz, b.xyz)

    def test_yaw_180_is_rigid_rotation(self, small_world):
        spec = SceneSpec(seed=3, noise_sigma=0.0, points_per_scan=8000)
        a = render_scan(small_world, Pose.from_yaw(5.0, -3.0, 0.4), spec)
        b = render_scan(small_world, Pose.from_yaw(5.0, -3.0, 0.4 + math.pi), spec)
        np.testing.assert_allclose(b.xyz, a.xyz * [-1, -1, 1], atol=1e-9)

    def test_budget(self, small_world):
        spec = SceneSpec(seed=3, points_per_scan=500)
        assert len(render_scan(small_world, Pose.from_yaw(0, 0, 0), spec)) <= 500

    def test_noise_is_seeded_per_frame(self, small_world):
        spec = SceneSpec(seed=3, noise_sigma=0.05, points_per_scan=8000)
        pose = Pose.from_yaw(0, 0, 0)
        assert np.array_equal(render_scan(small_world, pose, spec, 4).xyz, render_scan(small_world, pose, spec, 4).xyz)
        assert not np.array_equal(render_scan(small_world, pose, spec, 4).xyz, render_scan(small_world, pose, spec, 5).xyz)

    def test_sensor_yaw_shift_equivariance(self, small_world):
        spec = SceneSpec(seed=3, noise_sigma=0.0, points_per_scan=8000)
        cfg = DescriptorConfig(pca_enabled=False, downsample_leaf=None)
        base = build_descriptor(render_scan(small_world, Pose.from_yaw(1, 2, 0.0), spec), cfg)
        for k in (3, 30):
            # Sensor yawed by -2*pi*k/Ns sees the world rotated by +2*pi*k/Ns.
            rot = build_descriptor(render_scan(small_world, Pose.from_yaw(1, 2, -2 * math.pi * k / 60), spec), cfg)
            np.testing.assert_allclose(rot.matrix, base.shifted(k).matrix, rtol=1e-6, atol=1e-9)


class TestSequences:
    def test_no_overlap_no_loops(self):
        seq = planted_loop_sequence(SceneSpec(points_per_scan=2000), loop_trajectory(120, revisit="none"))
        assert seq.truth.num_positives == 0

    def test_reverse_revisits_labelled(self, benchmark_sequence):
        truth = benchmark_sequence.truth
        assert truth.num_positives >= 25
        pos = truth.positions
        # Pose-distance oracle.
        expected = sum(
            any(np.linalg.norm(pos[q] - pos[m]) < 5 for m in range(q - 49)) for q in range(len(pos))
        )
        assert truth.num_positives == expected

    def test_exact_revisit_scores_one(self):
        scene = SceneSpec(noise_sigma=0.0, points_per_scan=15000)
        traj = loop_trajectory(120, 20, revisit="reverse", lateral_offset=0.0, jitter=0.0, yaw_jitter_deg=0.0)
        traj.waypoints[100:] = traj.waypoints[:20]  # same poses re-rendered
        seq = planted_loop_sequence(scene, traj)
        descs = [build_descriptor(s) for s in seq.scans]
        db = DescriptorDatabase()
        for i, d in enumerate(descs[:100]):
            db.insert(i, d)
        for q in range(100, 120):
            m = detect_loop(db, q, descs[q])
            assert m.matched_frame == q - 100
            assert m.similarity == pytest.approx(1.0, abs=1e-12)

    def test_export_round_trip(self, tmp_path):
        seq = planted_loop_sequence(SceneSpec(points_per_scan=1000), loop_trajectory(80, 10))
        export_kitti(seq, tmp_path)
        assert len(list((tmp_path / "velodyne").glob("*.bin"))) == 80
        assert len(load_poses(tmp_path / "poses.txt")) == 80
        scan = load_kitti_bin(tmp_path / "velodyne" / "000005.bin")
        np.testing.assert_allclose(scan.xyz, seq.scans[5].xyz, atol=1e-4)
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["revisit_segments"][0]["direction"] == "reverse"
        assert sum(truth["has_true_loop"]) == seq.truth.num_positives
