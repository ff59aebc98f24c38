"""Polar cell partitioning and the two-scale normal distribution descriptor.

Each scan is split into ``num_rings x num_sectors`` bird's-eye-view cells.
Every sufficiently populated cell gets a Gaussian fit; the descriptor stores
per-cell density scores (``Pc``) stacked over per-cell differential entropies
(``Ec``). Single-scale encodings used for ablation (``P``, ``E``, ``H``) keep
one ``num_rings x num_sectors`` block.
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import (
    DegenerateAlignmentError,
    PointCloud,
    _atomic_write_bytes,
    pca_align,
    planar_range,
    range_filter,
    voxel_downsample,
)

TWO_PI = 2.0 * math.pi
GAUSS_ENTROPY_CONST = 1.5 * (math.log(TWO_PI) + 1.0)
EIG_FLOOR = 1e-3
EIG_EPS = 1e-12


class Encoding(str, enum.Enum):
    P = "P"
    E = "E"
    H = "H"
    P_PLUS_E = "P_plus_E"

    @classmethod
    def parse(cls, value) -> "Encoding":
        if isinstance(value, cls):
            return value
        aliases = {"P+E": cls.P_PLUS_E, "PE": cls.P_PLUS_E, "P_PLUS_E": cls.P_PLUS_E}
        if value in aliases:
            return aliases[value]
        return cls(value)

    @property
    def label(self) -> str:
        return "P+E" if self is Encoding.P_PLUS_E else self.value

    @property
    def tag(self) -> int:
        return list(Encoding).index(self)


@dataclass(frozen=True)
class DescriptorConfig:
    num_rings: int = 20
    num_sectors: int = 60
    max_range: float = 80.0
    min_cell_points: int = 5
    encoding: Encoding = Encoding.P_PLUS_E
    pca_enabled: bool = True
    # None or 0 disables downsampling.
    downsample_leaf: float | None = 0.25

    def __post_init__(self):
        object.__setattr__(self, "encoding", Encoding.parse(self.encoding))
        if self.num_rings < 1:
            raise ValueError("num_rings must be >= 1")
        if self.num_sectors < 2:
            raise ValueError("num_sectors must be >= 2")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if self.min_cell_points < 4:
            raise ValueError("min_cell_points must be >= 4")
        if self.downsample_leaf is not None and self.downsample_leaf < 0:
            raise ValueError("downsample_leaf must be non-negative")

    @property
    def rows(self) -> int:
        return 2 * self.num_rings if self.encoding is Encoding.P_PLUS_E else self.num_rings


@dataclass(frozen=True)
class CellStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int
    # Eigen-decomposition of the regularized covariance.
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def precision(self) -> np.ndarray:
        return (self.eigvecs / self.eigvals) @ self.eigvecs.T

    @property
    def logdet(self) -> float:
        return float(np.sum(np.log(self.eigvals)))


@dataclass(frozen=True, eq=False)
class Descriptor:
    matrix: np.ndarray
    num_rings: int
    num_sectors: int
    encoding: Encoding = Encoding.P_PLUS_E

    def __post_init__(self):
        enc = Encoding.parse(self.encoding)
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        rows = 2 * self.num_rings if enc is Encoding.P_PLUS_E else self.num_rings
        if m.shape != (rows, self.num_sectors):
            raise ValueError(f"matrix shape {m.shape} does not match ({rows}, {self.num_sectors})")
        if not np.isfinite(m).all():
            raise ValueError("descriptor contains non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "encoding", enc)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def Pc(self) -> np.ndarray | None:
        if self.encoding is Encoding.P_PLUS_E:
            return self.matrix[: self.num_rings]
        return self.matrix if self.encoding is Encoding.P else None

    @property
    def Ec(self) -> np.ndarray | None:
        if self.encoding is Encoding.P_PLUS_E:
            return self.matrix[self.num_rings :]
        return self.matrix if self.encoding is Encoding.E else None

    def shifted(self, k: int) -> "Descriptor":
        """Circularly shift columns so column ``j`` moves to ``j + k``."""
        return Descriptor(np.roll(self.matrix, k, axis=1), self.num_rings, self.num_sectors, self.encoding)

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (
            self.encoding is other.encoding
            and self.num_rings == other.num_rings
            and np.array_equal(self.matrix, other.matrix)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# cells

def cell_indices(xyz: np.ndarray, num_rings: int, num_sectors: int, max_range: float):
    """Ring and sector index of every point (points beyond max_range clamp to the last ring)."""
    rho = planar_range(xyz)
    theta = np.mod(np.arctan2(xyz[:, 1], xyz[:, 0]), TWO_PI)
    ring = np.minimum(np.floor(rho * (num_rings / max_range)).astype(np.int64), num_rings - 1)
    sector = np.minimum(np.floor(theta * (num_sectors / TWO_PI)).astype(np.int64), num_sectors - 1)
    return ring, sector


def partition_cells(cloud: PointCloud, cfg: DescriptorConfig) -> list[list[np.ndarray]]:
    """Group points into a ``num_rings x num_sectors`` grid of ``(n, 3)`` arrays."""
    ring, sector = cell_indices(cloud.xyz, cfg.num_rings, cfg.num_sectors, cfg.max_range)
    flat = ring * cfg.num_sectors + sector
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(cfg.num_rings * cfg.num_sectors + 1))
    pts = cloud.xyz[order]
    return [
        [pts[bounds[i * cfg.num_sectors + j] : bounds[i * cfg.num_sectors + j + 1]] for j in range(cfg.num_sectors)]
        for i in range(cfg.num_rings)
    ]


def _regularize(cov: np.ndarray):
    """Eigen-decompose (batched) covariances and floor small eigenvalues.

    Returns ``(eigvals, eigvecs, valid)``; ``valid`` is False where the largest
    eigenvalue is not above ``EIG_EPS``.
    """
    evals, evecs = np.linalg.eigh(cov)
    lmax = evals[..., -1]
    valid = lmax > EIG_EPS
    floor = EIG_FLOOR * np.where(valid, lmax, 1.0)
    evals = np.maximum(evals, floor[..., None])
    return evals, evecs, valid


def cell_gaussian(points, min_cell_points: int = 5) -> CellStats | None:
    """Fit a regularized Gaussian to a cell; None when the cell is too sparse or flat."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < min_cell_points:
        return None
    mean = pts.mean(axis=0)
    c = pts - mean
    cov = c.T @ c / (n - 1)
    evals, evecs, valid = _regularize(cov)
    if not valid:
        return None
    reg = (evecs * evals) @ evecs.T
    return CellStats(mean, 0.5 * (reg + reg.T), n, evals, evecs)


def density_score(points, stats: CellStats) -> float:
    """Sum of unnormalized Gaussian kernel values of the cell's own points."""
    c = np.asarray(points, dtype=np.float64).reshape(-1, 3) - stats.mean
    proj = c @ stats.eigvecs
    d2 = np.sum(proj * proj / stats.eigvals, axis=1)
    return float(np.sum(np.exp(-0.5 * d2)))


def cell_entropy(stats: CellStats) -> float:
    """Differential entropy (nats) of the fitted 3D Gaussian."""
    e = GAUSS_ENTROPY_CONST + 0.5 * stats.logdet
    if not math.isfinite(e):
        raise ArithmeticError("non-finite covariance determinant")
    return e


def max_height(points) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return float(pts[:, 2].max()) if len(pts) else 0.0


# ---------------------------------------------------------------------------
# descriptor

def preprocess(cloud: PointCloud, cfg: DescriptorConfig) -> PointCloud:
    if cfg.downsample_leaf:
        cloud = voxel_downsample(cloud, cfg.downsample_leaf)
    cloud = range_filter(cloud, cfg.max_range)
    if cfg.pca_enabled:
        try:
            cloud = pca_align(cloud)
        except DegenerateAlignmentError:
            pass
    return cloud


def _cell_blocks(xyz: np.ndarray, cfg: DescriptorConfig):
    """Vectorized per-cell encodings; returns ``(P, E, H)`` blocks of shape (Nr, Ns)."""
    nr, ns = cfg.num_rings, cfg.num_sectors
    ncell = nr * ns
    P = np.zeros(ncell)
    E = np.zeros(ncell)
    H = np.zeros(ncell)
    if len(xyz) == 0:
        return P.reshape(nr, ns), E.reshape(nr, ns), H.reshape(nr, ns)

    ring, sector = cell_indices(xyz, nr, ns, cfg.max_range)
    cell = ring * ns + sector
    counts = np.bincount(cell, minlength=ncell)

    occupied = counts > 0
    hmax = np.full(ncell, -np.inf)
    np.maximum.at(hmax, cell, xyz[:, 2])
    H[occupied] = hmax[occupied]

    if cfg.encoding is Encoding.H:
        return P.reshape(nr, ns), E.reshape(nr, ns), H.reshape(nr, ns)

    safe = np.maximum(counts, 1)
    mean = np.stack([np.bincount(cell, weights=xyz[:, k], minlength=ncell) for k in range(3)], axis=1) / safe[:, None]
    c = xyz - mean[cell]
    cov = np.empty((ncell, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(cell, weights=c[:, a] * c[:, b], minlength=ncell)
            cov[:, a, b] = cov[:, b, a] = s / np.maximum(counts - 1, 1)

    fit = counts >= cfg.min_cell_points
    evals, evecs, valid = _regularize(cov[fit])
    fit_idx = np.flatnonzero(fit)[valid]
    evals, evecs = evals[valid], evecs[valid]

    good = np.zeros(ncell, dtype=bool)
    good[fit_idx] = True
    slot = np.full(ncell, -1)
    slot[fit_idx] = np.arange(len(fit_idx))

    sel = good[cell]
    proj = np.einsum("ni,nij->nj", c[sel], evecs[slot[cell[sel]]])
    d2 = np.sum(proj * proj / evals[slot[cell[sel]]], axis=1)
    P[:] = np.bincount(cell[sel], weights=np.exp(-0.5 * d2), minlength=ncell)
    E[fit_idx] = GAUSS_ENTROPY_CONST + 0.5 * np.sum(np.log(evals), axis=1)
    return P.reshape(nr, ns), E.reshape(nr, ns), H.reshape(nr, ns)


def encode_cloud(cloud: PointCloud, cfg: DescriptorConfig) -> Descriptor:
    """Encode an already preprocessed cloud."""
    P, E, H = _cell_blocks(cloud.xyz, cfg)
    enc = cfg.encoding
    if enc is Encoding.P_PLUS_E:
        m = np.vstack([P, E])
    else:
        m = {Encoding.P: P, Encoding.E: E, Encoding.H: H}[enc]
    return Descriptor(m, cfg.num_rings, cfg.num_sectors, enc)


def build_descriptor(cloud: PointCloud, cfg: DescriptorConfig | None = None) -> Descriptor:
    """Downsample, range-filter, optionally PCA-align, then encode a raw scan."""
    cfg = cfg or DescriptorConfig()
    return encode_cloud(preprocess(cloud, cfg), cfg)


def search_key(desc: Descriptor) -> np.ndarray:
    """Row sums of the descriptor matrix."""
    return desc.matrix.sum(axis=1)


def align_key(desc: Descriptor) -> np.ndarray:
    """Column sums of the descriptor matrix."""
    return desc.matrix.sum(axis=0)


# ---------------------------------------------------------------------------
# serialization
#
# Binary layout (little-endian):
#   4s   magic  b"NDD1"
#   u32  num_rings
#   u32  num_sectors
#   u32  encoding tag (0=P, 1=E, 2=H, 3=P_plus_E)
#   f64  rows * num_sectors matrix entries, row-major

_MAGIC = b"NDD1"
_HEADER = struct.Struct("<4sIII")


def descriptor_to_bytes(desc: Descriptor) -> bytes:
    head = _HEADER.pack(_MAGIC, desc.num_rings, desc.num_sectors, desc.encoding.tag)
    return head + desc.matrix.astype("<f8").tobytes()


def descriptor_from_bytes(raw: bytes) -> Descriptor:
    if len(raw) < _HEADER.size:
        raise ValueError("truncated descriptor header")
    magic, nr, ns, tag = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError("not an NDD descriptor file")
    enc = list(Encoding)[tag]
    rows = 2 * nr if enc is Encoding.P_PLUS_E else nr
    body = raw[_HEADER.size :]
    if len(body) != rows * ns * 8:
        raise ValueError("descriptor payload size does not match header")
    m = np.frombuffer(body, dtype="<f8").reshape(rows, ns)
    return Descriptor(m.astype(np.float64), nr, ns, enc)


def save_descriptor(desc: Descriptor, path) -> None:
    _atomic_write_bytes(Path(path), descriptor_to_bytes(desc))


def load_descriptor(path) -> Descriptor:
    return descriptor_from_bytes(Path(path).read_bytes())


def descriptor_to_csv(desc: Descriptor) -> str:
    buf = io.StringIO()
    buf.write(f"# num_rings={desc.num_rings} num_sectors={desc.num_sectors} encoding={desc.encoding.value}\n")
    for row in desc.matrix:
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def descriptor_from_csv(text: str) -> Descriptor:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("missing descriptor CSV header")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    rows = [[float(v) for v in line.split(",")] for line in lines[1:] if line.strip()]
    return Descriptor(np.array(rows), int(meta["num_rings"]), int(meta["num_sectors"]), meta["encoding"])
