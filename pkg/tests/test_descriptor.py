import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from ndd.descriptor import (
    Descriptor,
    DescriptorConfig,
    Encoding,
    align_key,
    build_descriptor,
    cell_entropy,
    cell_gaussian,
    density_score,
    descriptor_from_bytes,
    descriptor_from_csv,
    descriptor_to_bytes,
    descriptor_to_csv,
    encode_cloud,
    load_descriptor,
    max_height,
    partition_cells,
    save_descriptor,
    search_key,
)
from ndd.pointcloud import PointCloud, rotate_z

ENTROPY_UNIT = 4.256815599614018  # 1.5 * (ln 2pi + 1)


def _stats_from_cov(cov):
    """Regularized stats for an exactly known covariance (via a point set)."""
    # Six points +-sqrt(3*lambda_i) along each eigenvector reproduce cov with 1/(N-1).
    evals, evecs = np.linalg.eigh(cov)
    pts = []
    for lam, v in zip(evals, evecs.T):
        a = math.sqrt(2.5 * lam)
        pts += [a * v, -a * v]
    return cell_gaussian(np.array(pts), min_cell_points=5)


class TestPartition:
    cfg = DescriptorConfig(pca_enabled=False, downsample_leaf=None)

    def test_origin_in_ring_zero(self):
        grid = partition_cells(PointCloud([[0.0, 0.0, 1.0]]), self.cfg)
        assert len(grid[0][0]) == 1

    def test_clamped_outer_boundary(self):
        eps = 1e-9
        p = [80 * math.cos(-eps), 80 * math.sin(-eps), 0.0]
        grid = partition_cells(PointCloud([p]), self.cfg)
        assert len(grid[19][59]) == 1

    def test_counts_match_per_point_oracle(self, rng):
        xyz = rng.uniform(-80, 80, (10_000, 3))
        xyz = xyz[np.hypot(xyz[:, 0], xyz[:, 1]) <= 80]
        grid = partition_cells(PointCloud(xyz), self.cfg)
        expected = np.zeros((20, 60), dtype=int)
        for x, y, _ in xyz.tolist():
            rho = math.hypot(x, y)
            theta = math.atan2(y, x) % (2 * math.pi)
            i = min(int(math.floor(rho * 20 / 80)), 19)
            j = min(int(math.floor(theta * 60 / (2 * math.pi))), 59)
            expected[i, j] += 1
        got = np.array([[len(c) for c in row] for row in grid])
        assert np.array_equal(got, expected)
        assert got.sum() == len(xyz)


class TestCellGaussian:
    def test_below_threshold(self, rng):
        assert cell_gaussian(rng.standard_normal((4, 3)), 5) is None

    def test_coplanar_floor(self, rng):
        pts = np.column_stack([rng.uniform(-1, 1, (5, 2)), np.zeros(5)])
        s = cell_gaussian(pts, 5)
        assert s.eigvals[0] == 1e-3 * s.eigvals[-1]

    def test_all_identical_points_empty(self):
        assert cell_gaussian(np.ones((10, 3)), 5) is None

    def test_monte_carlo_recovers_gaussian(self):
        rng = np.random.default_rng(2024)
        mu0 = np.array([3.0, -1.0, 0.5])
        A = np.array([[1.0, 0.3, 0.0], [0.0, 0.8, 0.2], [0.1, 0.0, 0.5]])
        sigma0 = A @ A.T
        pts = rng.multivariate_normal(mu0, sigma0, size=1000)
        s = cell_gaussian(pts, 5)
        assert np.all(np.abs(s.mean - mu0) < 0.1)
        assert np.all(np.abs(s.cov - sigma0) < 0.15 * np.linalg.norm(sigma0, 2))

    def test_covariance_symmetric(self, rng):
        s = cell_gaussian(rng.standard_normal((50, 3)) * [5, 1, 0.01], 5)
        assert np.max(np.abs(s.cov - s.cov.T)) <= 1e-12
        assert np.all(np.linalg.eigvalsh(s.cov) > 0)


class TestDensityScore:
    def test_point_at_mean_contributes_one(self, rng):
        pts = rng.standard_normal((20, 3))
        s = cell_gaussian(pts, 5)
        with_mean = np.vstack([pts, s.mean])
        assert density_score(with_mean, s) - density_score(pts, s) == pytest.approx(1.0, abs=1e-15)

    def test_closed_form(self):
        # Unit covariance: points at distance sqrt(2) along axes have d^2 = 2.
        s = _stats_from_cov(np.eye(3))
        np.testing.assert_allclose(s.cov, np.eye(3), atol=1e-12)
        pts = math.sqrt(2) * np.array([[1, 0, 0], [0, -1, 0], [0, 0, 1], [-1, 0, 0]], dtype=float)
        assert density_score(pts, s) == pytest.approx(4 * math.exp(-1), rel=1e-12)

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(99)
        pts = rng.multivariate_normal([1, 2, 3], [[2, 0.5, 0], [0.5, 1, 0.1], [0, 0.1, 0.3]], size=100)
        s = cell_gaussian(pts, 5)
        mpmath.mp.dps = 40
        inv = mpmath.inverse(mpmath.matrix(s.cov.tolist()))
        mu = mpmath.matrix(s.mean.tolist())
        total = mpmath.mpf(0)
        for p in pts.tolist():
            d = mpmath.matrix(p) - mu
            total += mpmath.exp(-(d.T * inv * d)[0] / 2)
        assert density_score(pts, s) == pytest.approx(float(total), rel=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(5, 60))
    def test_bounds_rotation_and_translation_invariance(self, seed, n):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((n, 3)) * rng.uniform(0.01, 3, 3)
        s = cell_gaussian(pts, 5)
        score, ent = density_score(pts, s), cell_entropy(s)
        assert 0 < score <= n
        R = Rotation.random(random_state=seed).as_matrix()
        rot = pts @ R.T
        sr = cell_gaussian(rot, 5)
        assert density_score(rot, sr) == pytest.approx(score, rel=1e-6)
        assert cell_entropy(sr) == pytest.approx(ent, rel=1e-6, abs=1e-9)
        shifted = pts + rng.uniform(-100, 100, 3)
        st_ = cell_gaussian(shifted, 5)
        assert density_score(shifted, st_) == pytest.approx(score, rel=1e-9)
        assert cell_entropy(st_) == pytest.approx(ent, rel=1e-9, abs=1e-9)


class TestEntropy:
    def test_identity(self):
        assert cell_entropy(_stats_from_cov(np.eye(3))) == pytest.approx(ENTROPY_UNIT, abs=1e-9)

    def test_diag(self):
        e = cell_entropy(_stats_from_cov(np.diag([4.0, 1.0, 1.0])))
        assert e == pytest.approx(ENTROPY_UNIT + 0.5 * math.log(4), abs=1e-9)
        assert e == pytest.approx(4.949962, abs=1e-6)

    def test_rotation_invariant(self):
        cov = np.diag([3.0, 1.0, 0.2])
        R = Rotation.from_euler("zyx", [0.3, -1.1, 2.0]).as_matrix()
        a = cell_entropy(_stats_from_cov(cov))
        b = cell_entropy(_stats_from_cov(R @ cov @ R.T))
        assert a == pytest.approx(b, abs=1e-9)


class TestMaxHeight:
    def test_values(self):
        assert max_height([[0, 0, -1], [0, 0, 0.5], [0, 0, 2.3]]) == 2.3
        assert max_height(np.empty((0, 3))) == 0.0
        assert max_height([[0, 0, -3], [0, 0, -1]]) == -1


def _oracle_descriptor(cloud, cfg):
    """Per-cell reference built from the scalar cell functions."""
    grid = partition_cells(cloud, cfg)
    P = np.zeros((cfg.num_rings, cfg.num_sectors))
    E = np.zeros_like(P)
    H = np.zeros_like(P)
    for i, row in enumerate(grid):
        for j, pts in enumerate(row):
            H[i, j] = max_height(pts)
            s = cell_gaussian(pts, cfg.min_cell_points)
            if s is not None:
                P[i, j] = density_score(pts, s)
                E[i, j] = cell_entropy(s)
    return P, E, H


class TestBuildDescriptor:
    def test_empty_cloud(self):
        d = build_descriptor(PointCloud(np.empty((0, 3))))
        assert d.shape == (40, 60)
        assert not d.matrix.any()

    def test_default_shape(self, benchmark_sequence):
        d = build_descriptor(benchmark_sequence.scans[0])
        assert d.shape == (2 * 20, 60)
        assert np.all(d.Pc >= 0)

    @pytest.mark.parametrize("enc", list(Encoding))
    def test_vectorized_matches_per_cell_oracle(self, benchmark_sequence, enc):
        cfg = DescriptorConfig(encoding=enc, pca_enabled=False, downsample_leaf=None)
        cloud = benchmark_sequence.scans[3]
        d = encode_cloud(cloud, cfg)
        P, E, H = _oracle_descriptor(cloud, cfg)
        want = {Encoding.P: P, Encoding.E: E, Encoding.H: H, Encoding.P_PLUS_E: np.vstack([P, E])}[enc]
        np.testing.assert_allclose(d.matrix, want, rtol=1e-9, atol=1e-12)
        # Empty cells are exactly zero in every block.
        empty = np.array([[len(c) == 0 for c in row] for row in partition_cells(cloud, cfg)])
        rows = np.vstack([empty, empty]) if enc is Encoding.P_PLUS_E else empty
        assert not d.matrix[rows].any()

    def test_single_scale_shapes(self, benchmark_sequence):
        for enc in (Encoding.P, Encoding.E, Encoding.H):
            d = build_descriptor(benchmark_sequence.scans[0], DescriptorConfig(encoding=enc))
            assert d.shape == (20, 60)

    def test_shift_equivariance(self, benchmark_sequence):
        cfg = DescriptorConfig(pca_enabled=False, downsample_leaf=None)
        cloud = benchmark_sequence.scans[10]
        base = build_descriptor(cloud, cfg)
        for k in (1, 7, 30, 59):
            rot = build_descriptor(rotate_z(cloud, 2 * math.pi * k / 60), cfg)
            np.testing.assert_allclose(rot.matrix, base.shifted(k).matrix, rtol=1e-6, atol=1e-9)

    def test_deterministic(self, benchmark_sequence):
        a = build_descriptor(benchmark_sequence.scans[5])
        b = build_descriptor(benchmark_sequence.scans[5])
        assert a.matrix.tobytes() == b.matrix.tobytes()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DescriptorConfig(num_sectors=1)
        with pytest.raises(ValueError):
            DescriptorConfig(min_cell_points=3)
        assert DescriptorConfig(encoding="P+E").encoding is Encoding.P_PLUS_E


class TestKeys:
    def _rand(self, rng):
        return Descriptor(rng.standard_normal((40, 60)), 20, 60)

    def test_zero(self):
        d = Descriptor(np.zeros((40, 60)), 20, 60)
        assert not search_key(d).any() and not align_key(d).any()

    def test_single_entry(self):
        m = np.zeros((40, 60))
        m[7, 13] = 2.5
        d = Descriptor(m, 20, 60)
        assert search_key(d).tolist() == (2.5 * np.eye(40)[7]).tolist()
        assert align_key(d).tolist() == (2.5 * np.eye(60)[13]).tolist()

    def test_row_and_column_sum_oracles(self, rng):
        d = self._rand(rng)
        rows = [math.fsum(r) for r in d.matrix.tolist()]
        cols = [math.fsum(c) for c in d.matrix.T.tolist()]
        np.testing.assert_allclose(search_key(d), rows, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(align_key(d), cols, rtol=1e-13, atol=1e-13)

    def test_align_key_shift(self, rng):
        d = self._rand(rng)
        assert np.array_equal(align_key(d.shifted(7)), np.roll(align_key(d), 7))

    def test_linearity(self, rng):
        d = self._rand(rng)
        scaled = Descriptor(3.5 * d.matrix, 20, 60)
        np.testing.assert_allclose(search_key(scaled), 3.5 * search_key(d), rtol=1e-12)
        np.testing.assert_allclose(align_key(scaled), 3.5 * align_key(d), rtol=1e-12)


class TestSerialization:
    @pytest.mark.parametrize("enc", list(Encoding))
    def test_binary_round_trip(self, tmp_path, rng, enc):
        rows = 40 if enc is Encoding.P_PLUS_E else 20
        d = Descriptor(rng.standard_normal((rows, 60)), 20, 60, enc)
        save_descriptor(d, tmp_path / "d.ndd")
        back = load_descriptor(tmp_path / "d.ndd")
        assert back == d
        assert back.matrix.tobytes() == d.matrix.tobytes()

    def test_binary_layout(self):
        d = Descriptor(np.arange(6, dtype=float).reshape(2, 3), 1, 3, "P_plus_E")
        raw = descriptor_to_bytes(d)
        assert raw[:4] == b"NDD1"
        assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 3, 3]
        assert np.frombuffer(raw[16:], "<f8").tolist() == list(range(6))
        assert descriptor_from_bytes(raw) == d

    def test_csv_round_trip(self, rng):
        d = Descriptor(rng.standard_normal((40, 60)) * 1e3, 20, 60)
        back = descriptor_from_csv(descriptor_to_csv(d))
        assert back.matrix.tobytes() == d.matrix.tobytes()

    def test_corrupt(self):
        with pytest.raises(ValueError):
            descriptor_from_bytes(b"XXXX" + bytes(12))
