"""Descriptor database, key-based candidate retrieval, rotation alignment and scoring."""

from __future__ import annotations

import bisect
import enum
import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .descriptor import Descriptor, align_key, load_descriptor, save_descriptor, search_key
from .pointcloud import _atomic_write_bytes


class UndefinedCorrelationError(ValueError):
    """Correlation requested for a descriptor with zero variance."""


class AlignmentStrategy(str, enum.Enum):
    ROW_VECTOR = "row_vector"
    FULL_SHIFT = "full_shift"
    BINARY_XNOR = "binary_xnor"


class RetrievalStrategy(str, enum.Enum):
    KEY_KDTREE = "key_kdtree"
    FULL_LINEAR_SCAN = "full_linear_scan"


class Matcher(str, enum.Enum):
    CORRELATION = "correlation"
    SC_COSINE = "sc_cosine"

    @classmethod
    def parse(cls, value) -> "Matcher":
        if isinstance(value, cls):
            return value
        return {"corr": cls.CORRELATION, "cos": cls.SC_COSINE}.get(value) or cls(value)

    @property
    def label(self) -> str:
        return "corr" if self is Matcher.CORRELATION else "cos"


@dataclass(frozen=True)
class RetrievalConfig:
    K: int = 25
    threshold: float = 0.65
    alignment_strategy: AlignmentStrategy = AlignmentStrategy.ROW_VECTOR
    retrieval_strategy: RetrievalStrategy = RetrievalStrategy.KEY_KDTREE
    matcher: Matcher = Matcher.CORRELATION

    def __post_init__(self):
        object.__setattr__(self, "alignment_strategy", AlignmentStrategy(self.alignment_strategy))
        object.__setattr__(self, "retrieval_strategy", RetrievalStrategy(self.retrieval_strategy))
        object.__setattr__(self, "matcher", Matcher.parse(self.matcher))
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [-1, 1]")


@dataclass(frozen=True)
class MatchResult:
    query_id: int
    matched_frame: int
    similarity: float
    shift: int
    accepted: bool


# ---------------------------------------------------------------------------
# shift helpers
#
# Shift convention: a shift ``s`` between A and B means B is (approximately)
# A with its columns rolled by ``s``, i.e. ``B ~ np.roll(A, s, axis=-1)``.
# Aligning B onto A therefore rolls B by ``-s``.

@lru_cache(maxsize=16)
def _shift_index(n: int) -> np.ndarray:
    """``idx[s, j] = (j + s) % n`` so ``v[idx[s]] == np.roll(v, -s)``."""
    idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
    idx.setflags(write=False)
    return idx


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _matrix(d) -> np.ndarray:
    return d.matrix if isinstance(d, Descriptor) else np.asarray(d, dtype=np.float64)


def best_shift(va, vb) -> tuple[int, float]:
    """Circular shift maximizing the cosine similarity of two alignment keys."""
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    _check_shapes(va, vb)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0, 0.0
    scores = vb[_shift_index(len(vb))] @ va / (na * nb)
    s = int(np.argmax(scores))
    return s, float(scores[s])


def correlation(da, db) -> float:
    """Pearson correlation over all entries of two equally shaped matrices."""
    a, b = _matrix(da), _matrix(db)
    _check_shapes(a, b)
    ac = a - a.mean()
    bc = b - b.mean()
    den = math.sqrt(float(np.sum(ac * ac)) * float(np.sum(bc * bc)))
    if den == 0.0:
        raise UndefinedCorrelationError("zero-variance descriptor")
    return float(np.clip(np.sum(ac * bc) / den, -1.0, 1.0))


def sc_cosine(da, db) -> float:
    """Mean column-wise cosine similarity; all-zero columns contribute 0."""
    a, b = _matrix(da), _matrix(db)
    _check_shapes(a, b)
    num = np.sum(a * b, axis=0)
    den = np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0)
    cos = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(cos.mean())


def full_shift_alignment(da, db) -> tuple[int, float]:
    """Correlation of A against every column shift of B; returns the best."""
    a, b = _matrix(da), _matrix(db)
    _check_shapes(a, b)
    ac = a - a.mean()
    bc = b - b.mean()
    den = math.sqrt(float(np.sum(ac * ac)) * float(np.sum(bc * bc)))
    if den == 0.0:
        return 0, 0.0
    rolled = bc[:, _shift_index(b.shape[1])]  # [row, shift, col]
    scores = np.einsum("rj,rsj->s", ac, rolled) / den
    s = int(np.argmax(scores))
    return s, float(np.clip(scores[s], -1.0, 1.0))


def binary_xnor_alignment(da, db) -> tuple[int, float]:
    """Agreement fraction of the binarized (non-zero) patterns over every shift."""
    a, b = _matrix(da) != 0, _matrix(db) != 0
    _check_shapes(a, b)
    rolled = b[:, _shift_index(b.shape[1])]
    agree = np.count_nonzero(rolled == a[:, None, :], axis=(0, 2))
    s = int(np.argmax(agree))
    return s, agree[s] / a.size


def full_shift_cosine(da, db) -> tuple[int, float]:
    """SC-style exhaustive shift search scored by column-wise cosine."""
    a, b = _matrix(da), _matrix(db)
    _check_shapes(a, b)
    scores = [sc_cosine(a, np.roll(b, -s, axis=1)) for s in range(b.shape[1])]
    s = int(np.argmax(scores))
    return s, scores[s]


# ---------------------------------------------------------------------------
# key index

class _KeyIndex:
    """Exact Euclidean KNN over search keys.

    Keys live in a growing array. A KD-tree covers a prefix of it; the
    remaining tail is scanned directly and folded into the tree once it grows
    past a fraction of the tree size.
    """

    def __init__(self, dim: int | None = None):
        self._keys = np.empty((0, dim or 0))
        self._n = 0
        self._tree = None
        self._n_tree = 0

    def __len__(self):
        return self._n

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._n]

    def append(self, key: np.ndarray) -> None:
        key = np.asarray(key, dtype=np.float64)
        if self._n == 0 and self._keys.shape[1] != len(key):
            self._keys = np.empty((16, len(key)))
        if len(key) != self._keys.shape[1]:
            raise ValueError("search key length differs from indexed keys")
        if self._n == len(self._keys):
            grown = np.empty((2 * len(self._keys), self._keys.shape[1]))
            grown[: self._n] = self._keys[: self._n]
            self._keys = grown
        self._keys[self._n] = key
        self._n += 1

    def _maybe_rebuild(self) -> None:
        tail = self._n - self._n_tree
        if tail > max(64, self._n_tree // 2):
            self._tree = cKDTree(self._keys[: self._n].copy())
            self._n_tree = self._n

    def query(self, q: np.ndarray, k: int, n_eligible: int) -> list[int]:
        """Row indices of the k nearest among rows ``[0, n_eligible)``.

        Ties on distance break towards the smaller row index.
        """
        n_eligible = min(n_eligible, self._n)
        if k <= 0 or n_eligible <= 0:
            return []
        q = np.asarray(q, dtype=np.float64)
        if len(q) != self._keys.shape[1]:
            raise ValueError("query key length differs from indexed keys")
        if k >= n_eligible:
            dist = np.sqrt(np.sum((self._keys[:n_eligible] - q) ** 2, axis=1))
            return [int(i) for i in np.lexsort((np.arange(n_eligible), dist))]
        self._maybe_rebuild()

        n_tree = min(self._n_tree, n_eligible)
        cand = [np.arange(n_tree, n_eligible)]
        if n_tree > 0:
            # Over-fetch by the number of ineligible rows in the tree.
            kq = min(self._n_tree, k + (self._n_tree - n_tree))
            _, idx = self._tree.query(q, k=kq)
            idx = np.atleast_1d(idx)
            cand.append(idx[idx < n_tree])
        cand = np.concatenate(cand)
        dist = np.sqrt(np.sum((self._keys[cand] - q) ** 2, axis=1))
        radius = np.partition(dist, k - 1)[k - 1]

        # Gather every row within the k-th distance so boundary ties are complete.
        ball = [np.arange(n_tree, n_eligible)]
        if n_tree > 0:
            hits = np.asarray(self._tree.query_ball_point(q, r=radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
            ball.append(hits[hits < n_tree])
        ball = np.unique(np.concatenate(ball))
        dist = np.sqrt(np.sum((self._keys[ball] - q) ** 2, axis=1))
        order = np.lexsort((ball, dist))[:k]
        return [int(i) for i in ball[order]]


# ---------------------------------------------------------------------------
# database

class DescriptorDatabase:
    """Ordered store of frame descriptors with a KD-tree over their search keys.

    One writer, many readers: ``insert`` and index maintenance hold a lock;
    scoring reads immutable per-frame data.
    """

    def __init__(self, exclusion_window: int = 50):
        if exclusion_window < 0:
            raise ValueError("exclusion_window must be non-negative")
        self.exclusion_window = exclusion_window
        self.ids: list[int] = []
        self.descriptors: list[Descriptor] = []
        self._align_keys: list[np.ndarray] = []
        self._norms: list[float] = []
        self._index = _KeyIndex()
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.ids)

    def insert(self, frame_id: int, desc: Descriptor) -> "DescriptorDatabase":
        frame_id = int(frame_id)
        with self._lock:
            if self.ids and frame_id <= self.ids[-1]:
                raise ValueError(f"frame id {frame_id} is not greater than last stored id {self.ids[-1]}")
            if self.descriptors and desc.shape != self.descriptors[0].shape:
                raise ValueError("descriptor shape differs from database contents")
            m = desc.matrix
            self._index.append(search_key(desc))
            self._align_keys.append(align_key(desc))
            self._norms.append(float(np.linalg.norm(m - m.mean())))
            self.descriptors.append(desc)
            self.ids.append(frame_id)
        return self

    def descriptor(self, frame_id: int) -> Descriptor:
        return self.descriptors[self._row(frame_id)]

    def _row(self, frame_id: int) -> int:
        i = bisect.bisect_left(self.ids, frame_id)
        if i == len(self.ids) or self.ids[i] != frame_id:
            raise KeyError(frame_id)
        return i

    def n_eligible(self, exclude_after: int) -> int:
        return bisect.bisect_right(self.ids, exclude_after)

    def knn_keys(self, query_key, K: int, exclude_after: int) -> list[int]:
        """Frame ids of the K nearest search keys among frames with id <= exclude_after."""
        with self._lock:
            rows = self._index.query(query_key, K, self.n_eligible(exclude_after))
            return [self.ids[r] for r in rows]

    def candidates(self, query_id: int, query_desc: Descriptor, cfg: RetrievalConfig) -> list[int]:
        exclude_after = query_id - self.exclusion_window
        if cfg.retrieval_strategy is RetrievalStrategy.FULL_LINEAR_SCAN:
            return self.ids[: self.n_eligible(exclude_after)]
        return sorted(self.knn_keys(search_key(query_desc), cfg.K, exclude_after))

    def detect(self, query_id: int, query_desc: Descriptor, cfg: RetrievalConfig | None = None) -> MatchResult | None:
        return detect_loop(self, query_id, query_desc, cfg)

    # -- persistence --------------------------------------------------------

    def dump(self, directory) -> None:
        """Write one descriptor file per frame plus ``index.txt``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = [f"# exclusion_window={self.exclusion_window}"]
        for fid, desc in zip(self.ids, self.descriptors):
            name = f"{fid:06d}.ndd"
            save_descriptor(desc, d / name)
            lines.append(f"{fid} {name}")
        _atomic_write_bytes(d / "index.txt", ("\n".join(lines) + "\n").encode())

    @classmethod
    def load(cls, directory) -> "DescriptorDatabase":
        d = Path(directory)
        excl = 50
        entries = []
        for line in (d / "index.txt").read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key == "exclusion_window":
                    excl = int(val)
                continue
            fid, name = line.split(maxsplit=1)
            entries.append((int(fid), name))
        db = cls(exclusion_window=excl)
        for fid, name in entries:
            db.insert(fid, load_descriptor(d / name))
        return db


# ---------------------------------------------------------------------------
# detection

class _PreparedQuery:
    """Per-query quantities reused across candidates."""

    def __init__(self, desc: Descriptor):
        self.desc = desc
        m = desc.matrix
        self.centered = m - m.mean()
        self.norm = float(np.linalg.norm(self.centered))
        self.align_key = align_key(desc)


def _similarity(q: _PreparedQuery, db: DescriptorDatabase, row: int, shift: int, matcher: Matcher) -> float:
    cand = db.descriptors[row].matrix
    aligned = np.roll(cand, -shift, axis=1) if shift else cand
    if matcher is Matcher.SC_COSINE:
        return sc_cosine(q.desc.matrix, aligned)
    den = q.norm * db._norms[row]
    if den == 0.0:
        return 0.0
    # Centering one side suffices: sum(ac) == 0 cancels the other mean.
    return float(np.clip(np.sum(q.centered * aligned) / den, -1.0, 1.0))


def score_candidate(q: _PreparedQuery, db: DescriptorDatabase, row: int, cfg: RetrievalConfig) -> tuple[int, float]:
    strategy = cfg.alignment_strategy
    cand = db.descriptors[row]
    if strategy is AlignmentStrategy.ROW_VECTOR:
        shift, _ = best_shift(q.align_key, db._align_keys[row])
    elif strategy is AlignmentStrategy.BINARY_XNOR:
        shift, _ = binary_xnor_alignment(q.desc, cand)
    elif cfg.matcher is Matcher.SC_COSINE:
        return full_shift_cosine(q.desc, cand)
    else:
        return full_shift_alignment(q.desc, cand)
    return shift, _similarity(q, db, row, shift, cfg.matcher)


def detect_loop(db: DescriptorDatabase, query_id: int, query_desc: Descriptor, cfg: RetrievalConfig | None = None) -> MatchResult | None:
    """Best-matching earlier frame for a query descriptor, or None without candidates.

    The best candidate is returned even when its similarity is below the
    threshold; ``accepted`` tells whether it counts as a loop closure.
    """
    cfg = cfg or RetrievalConfig()
    cand_ids = db.candidates(query_id, query_desc, cfg)
    if not cand_ids:
        return None
    q = _PreparedQuery(query_desc)
    best = None
    for fid in cand_ids:
        shift, sim = score_candidate(q, db, db._row(fid), cfg)
        if best is None or sim > best[1]:
            best = (fid, sim, shift)
    fid, sim, shift = best
    return MatchResult(query_id, fid, sim, shift, sim >= cfg.threshold)
