"""Ground truth, precision-recall, F1 / extended precision, sequence runs and ablations."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .descriptor import Descriptor, DescriptorConfig, Encoding, build_descriptor
from .pointcloud import PointCloud, Pose, _atomic_write_bytes
from .retrieval import (
    AlignmentStrategy,
    DescriptorDatabase,
    MatchResult,
    Matcher,
    RetrievalConfig,
    RetrievalStrategy,
    detect_loop,
)


class NoGroundTruthError(ValueError):
    """Recall is undefined because no query has a true loop."""


class SequenceError(RuntimeError):
    """A frame of a sequence could not be processed."""

    def __init__(self, frame: int, cause: Exception):
        super().__init__(f"frame {frame}: {cause}")
        self.frame = frame


@dataclass(frozen=True)
class GroundTruthConfig:
    revisit_radius: float = 5.0
    exclusion_window: int = 50

    def __post_init__(self):
        if not self.revisit_radius > 0:
            raise ValueError("revisit_radius must be positive")
        if self.exclusion_window < 0:
            raise ValueError("exclusion_window must be non-negative")


@dataclass
class GroundTruth:
    positions: np.ndarray
    has_true_loop: np.ndarray
    true_matches: list[frozenset[int]]
    config: GroundTruthConfig

    def is_true_match(self, query: int, match: int) -> bool:
        d = np.linalg.norm(self.positions[query] - self.positions[match])
        return bool(d < self.config.revisit_radius)

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.has_true_loop))


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    best_match_id: int | None
    similarity: float
    has_true_loop: bool
    match_is_true: bool
    shift: int = 0


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class Metrics:
    f1: float
    ep: float
    precision: float = 0.0  # at the max-F1 point
    recall: float = 0.0
    threshold: float = math.inf


@dataclass
class SequenceResult:
    records: list[QueryRecord]
    curve: list[PRPoint]
    metrics: Metrics
    desc_ms: list[float]
    retrieval_ms: list[float]
    matches: list[MatchResult | None] = field(default_factory=list)


# ---------------------------------------------------------------------------
# ground truth

def label_ground_truth(poses: Sequence[Pose], cfg: GroundTruthConfig | None = None) -> GroundTruth:
    """Mark frames that lie within ``revisit_radius`` of a frame at least
    ``exclusion_window`` frames earlier."""
    cfg = cfg or GroundTruthConfig()
    pos = np.array([p.translation for p in poses], dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    matches: list[frozenset[int]] = [frozenset()] * n
    if n:
        tree = cKDTree(pos)
        for q, near in enumerate(tree.query_ball_point(pos, r=cfg.revisit_radius)):
            near = np.asarray(near, dtype=np.int64)
            near = near[near <= q - cfg.exclusion_window]
            if len(near):
                d = np.linalg.norm(pos[near] - pos[q], axis=1)
                matches[q] = frozenset(int(m) for m in near[d < cfg.revisit_radius])
    has = np.array([bool(m) for m in matches], dtype=bool)
    return GroundTruth(pos, has, matches, cfg)


def make_record(query_id: int, match: MatchResult | None, truth: GroundTruth) -> QueryRecord:
    has = bool(truth.has_true_loop[query_id])
    if match is None:
        return QueryRecord(query_id, None, -math.inf, has, False)
    ok = truth.is_true_match(query_id, match.matched_frame)
    return QueryRecord(query_id, match.matched_frame, match.similarity, has, ok, match.shift)


def score_detection(record: QueryRecord, threshold: float) -> str:
    """Classify a query as ``"TP"``, ``"FP"``, ``"FN"`` or ``"TN"`` at a threshold."""
    if record.similarity >= threshold:
        return "TP" if record.match_is_true else "FP"
    return "FN" if record.has_true_loop else "TN"


# ---------------------------------------------------------------------------
# PR curve and summary metrics

def pr_curve(records: Sequence[QueryRecord]) -> list[PRPoint]:
    """Precision/recall at every distinct finite similarity, plus +inf.

    Points are ordered by ascending threshold.
    """
    n_pos = sum(1 for r in records if r.has_true_loop)
    if n_pos == 0:
        raise NoGroundTruthError("no query has a true loop; recall is undefined")
    sims = np.array([r.similarity for r in records], dtype=np.float64)
    true = np.array([r.match_is_true for r in records], dtype=bool)
    finite = np.isfinite(sims)
    sims, true = sims[finite], true[finite]

    order = np.argsort(-sims, kind="stable")
    sims, true = sims[order], true[order]
    tp = np.cumsum(true)
    fp = np.cumsum(~true)
    # Last index of each run of equal similarity = everything >= that value.
    last = np.flatnonzero(np.append(sims[1:] != sims[:-1], True)) if len(sims) else np.array([], dtype=np.int64)

    points = [PRPoint(math.inf, 1.0, 0.0)]
    for i in last:
        acc = tp[i] + fp[i]
        points.append(PRPoint(float(sims[i]), float(tp[i] / acc), float(tp[i] / n_pos)))
    points.sort(key=lambda p: p.threshold)
    return points


def f1_ep(curve: Sequence[PRPoint]) -> Metrics:
    """Max-F1 over the curve and extended precision ``0.5 * (R_P100 + P_R0)``.

    ``R_P100`` is the largest recall reached at precision 1 and ``P_R0`` the
    best precision at the smallest strictly positive recall on the curve.
    """
    if not curve:
        raise ValueError("empty PR curve")
    best = None
    for p in curve:
        s = p.precision + p.recall
        f1 = 2 * p.precision * p.recall / s if s > 0 else 0.0
        if best is None or f1 > best[0]:
            best = (f1, p)
    r_p100 = max((p.recall for p in curve if p.precision == 1.0), default=0.0)
    positive = [p for p in curve if p.recall > 0]
    if positive:
        r_min = min(p.recall for p in positive)
        p_r0 = max(p.precision for p in positive if p.recall == r_min)
    else:
        p_r0 = 0.0
    f1, at = best
    return Metrics(f1, 0.5 * (r_p100 + p_r0), at.precision, at.recall, at.threshold)


# ---------------------------------------------------------------------------
# sequence runs

ScanSource = Sequence[PointCloud] | Sequence[Callable[[], PointCloud]]


def _materialize(scan, i: int) -> PointCloud:
    try:
        return scan() if callable(scan) else scan
    except Exception as exc:
        raise SequenceError(i, exc) from exc


def describe_sequence(scans: ScanSource, dcfg: DescriptorConfig) -> tuple[list[Descriptor], list[float]]:
    descs, ms = [], []
    for i, scan in enumerate(scans):
        cloud = _materialize(scan, i)
        t0 = time.perf_counter()
        descs.append(build_descriptor(cloud, dcfg))
        ms.append(1e3 * (time.perf_counter() - t0))
    return descs, ms


def detect_sequence(
    descs: Sequence[Descriptor], truth: GroundTruth, rcfg: RetrievalConfig
) -> tuple[list[QueryRecord], list[MatchResult | None], list[float]]:
    """Stream descriptors in frame order: query the prior frames, then insert."""
    db = DescriptorDatabase(exclusion_window=truth.config.exclusion_window)
    records, matches, ms = [], [], []
    for i, desc in enumerate(descs):
        t0 = time.perf_counter()
        m = detect_loop(db, i, desc, rcfg)
        ms.append(1e3 * (time.perf_counter() - t0))
        db.insert(i, desc)
        matches.append(m)
        records.append(make_record(i, m, truth))
    return records, matches, ms


def run_sequence(
    scans: ScanSource,
    poses: Sequence[Pose],
    dcfg: DescriptorConfig | None = None,
    rcfg: RetrievalConfig | None = None,
    gt_cfg: GroundTruthConfig | None = None,
    descriptors: Sequence[Descriptor] | None = None,
) -> SequenceResult:
    """Describe, detect and score a whole sequence.

    Pass ``descriptors`` to reuse precomputed descriptors (description time
    is then reported as 0).
    """
    dcfg, rcfg = dcfg or DescriptorConfig(), rcfg or RetrievalConfig()
    if len(scans) != len(poses):
        raise ValueError(f"{len(scans)} scans but {len(poses)} poses")
    truth = label_ground_truth(poses, gt_cfg or GroundTruthConfig())
    if descriptors is None:
        descs, desc_ms = describe_sequence(scans, dcfg)
    else:
        descs, desc_ms = list(descriptors), [0.0] * len(descriptors)
    records, matches, ret_ms = detect_sequence(descs, truth, rcfg)
    curve = pr_curve(records)
    return SequenceResult(records, curve, f1_ep(curve), desc_ms, ret_ms, matches)


@dataclass(frozen=True)
class AblationRow:
    encoding: Encoding
    matcher: Matcher
    f1: float
    ep: float

    @property
    def tag(self) -> str:
        return f"{self.encoding.label}/{self.matcher.label}"


ABLATION_ENCODINGS = (Encoding.H, Encoding.E, Encoding.P, Encoding.P_PLUS_E)
ABLATION_MATCHERS = (Matcher.SC_COSINE, Matcher.CORRELATION)


def ablation_matrix(
    scans: ScanSource,
    poses: Sequence[Pose],
    base_dcfg: DescriptorConfig | None = None,
    base_rcfg: RetrievalConfig | None = None,
    gt_cfg: GroundTruthConfig | None = None,
) -> list[AblationRow]:
    """F1/EP for every encoding x matcher pair (descriptors built once per encoding)."""
    base_dcfg, base_rcfg = base_dcfg or DescriptorConfig(), base_rcfg or RetrievalConfig()
    rows = []
    for enc in ABLATION_ENCODINGS:
        dcfg = replace(base_dcfg, encoding=enc)
        descs, _ = describe_sequence(scans, dcfg)
        for matcher in ABLATION_MATCHERS:
            res = run_sequence(scans, poses, dcfg, replace(base_rcfg, matcher=matcher), gt_cfg, descriptors=descs)
            rows.append(AblationRow(enc, matcher, res.metrics.f1, res.metrics.ep))
    return rows


# ---------------------------------------------------------------------------
# timing

@dataclass(frozen=True)
class BenchRow:
    kind: str  # "alignment" | "retrieval" | "description"
    strategy: str
    mean_ms: float
    queries: int


def bench_retrieval(
    db: DescriptorDatabase,
    queries: Sequence[Descriptor],
    base_rcfg: RetrievalConfig | None = None,
    alignments: Iterable[AlignmentStrategy] = tuple(AlignmentStrategy),
    retrievals: Iterable[RetrievalStrategy] = tuple(RetrievalStrategy),
    repeats: int = 1,
) -> list[BenchRow]:
    """Mean per-query detection time for each alignment and retrieval strategy.

    Alignment strategies run with key retrieval; retrieval strategies run
    with row-vector alignment. Every stored frame is eligible.
    """
    base = base_rcfg or RetrievalConfig()
    qid = (db.ids[-1] if db.ids else 0) + db.exclusion_window + 1
    runs = [("alignment", replace(base, alignment_strategy=a, retrieval_strategy=RetrievalStrategy.KEY_KDTREE)) for a in alignments]
    runs += [("retrieval", replace(base, alignment_strategy=AlignmentStrategy.ROW_VECTOR, retrieval_strategy=r)) for r in retrievals]
    rows = []
    for kind, cfg in runs:
        detect_loop(db, qid, queries[0], cfg)  # warm caches (index rebuild)
        t0 = time.perf_counter()
        for _ in range(repeats):
            for q in queries:
                detect_loop(db, qid, q, cfg)
        ms = 1e3 * (time.perf_counter() - t0) / (repeats * len(queries))
        name = cfg.alignment_strategy.value if kind == "alignment" else cfg.retrieval_strategy.value
        rows.append(BenchRow(kind, name, ms, len(queries)))
    return rows


# ---------------------------------------------------------------------------
# CSV reports

def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    text = _csv_text(header, ([_fmt(v) for v in row] for row in rows))
    _atomic_write_bytes(Path(path), text.encode())


def write_pr_curve(path, curve: Sequence[PRPoint]) -> None:
    write_csv(path, ("threshold", "precision", "recall"), ((p.threshold, p.precision, p.recall) for p in curve))


def write_metrics(path, rows: Iterable[tuple[str, Metrics]]) -> None:
    write_csv(path, ("config_tag", "f1", "ep"), ((tag, m.f1, m.ep) for tag, m in rows))


def write_detections(path, records: Sequence[QueryRecord], threshold: float) -> None:
    write_csv(
        path,
        ("query_id", "matched_id", "similarity", "shift", "accepted", "has_true_loop", "match_is_true"),
        (
            (r.query_id, r.best_match_id, r.similarity, r.shift, int(r.similarity >= threshold), int(r.has_true_loop), int(r.match_is_true))
            for r in records
        ),
    )


def write_timing(path, desc_ms: Sequence[float], retrieval_ms: Sequence[float]) -> None:
    write_csv(path, ("frame", "desc_ms", "retrieval_ms"), ((i, d, r) for i, (d, r) in enumerate(zip(desc_ms, retrieval_ms))))
