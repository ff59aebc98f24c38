"""``ndd`` command line: describe, eval, ablate, bench, synth, serve."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .descriptor import Descriptor, DescriptorConfig, Encoding, build_descriptor, save_descriptor, descriptor_to_csv
from .evaluation import (
    GroundTruthConfig,
    Metrics,
    NoGroundTruthError,
    SequenceError,
    ablation_matrix,
    bench_retrieval,
    describe_sequence,
    run_sequence,
    write_csv,
    write_detections,
    write_metrics,
    write_pr_curve,
    write_timing,
)
from .pointcloud import MalformedFileError, _atomic_write_bytes, load_poses, load_scan
from .retrieval import AlignmentStrategy, DescriptorDatabase, Matcher, RetrievalConfig, RetrievalStrategy


class CommandError(Exception):
    pass


# ---------------------------------------------------------------------------
# arguments

def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline parameters")
    g.add_argument("--nr", type=int, default=20, help="number of rings (default: 20)")
    g.add_argument("--ns", type=int, default=60, help="number of sectors (default: 60)")
    g.add_argument("--max-range", type=float, default=80.0, help="sensing range in meters (default: 80)")
    g.add_argument("--k", type=int, default=25, help="KD-tree candidates (default: 25)")
    g.add_argument("--threshold", type=float, default=0.65, help="loop-closure similarity threshold (default: 0.65)")
    g.add_argument("--encoding", default="P_plus_E", choices=["P", "E", "H", "P_plus_E", "P+E"])
    g.add_argument("--matcher", default="correlation", choices=["correlation", "sc_cosine", "corr", "cos"])
    g.add_argument("--alignment", default="row_vector", choices=[s.value for s in AlignmentStrategy])
    g.add_argument("--retrieval", default="key_kdtree", choices=[s.value for s in RetrievalStrategy])
    g.add_argument("--pca", default="on", choices=["on", "off"], help="PCA heading alignment (default: on)")
    g.add_argument("--leaf", type=float, default=0.25, help="voxel leaf in meters, 0 disables (default: 0.25)")
    g.add_argument("--min-cell-points", type=int, default=5)
    g.add_argument("--exclusion", type=int, default=50, help="excluded recent frames (default: 50)")
    g.add_argument("--radius", type=float, default=5.0, help="true-loop radius in meters (default: 5)")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", type=Path, default=Path("ndd_out"), help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="ndd", description="Normal Distribution Descriptor loop-closure toolkit")
    parser.add_argument("--version", action="version", version=f"ndd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", parents=[common], help="compute descriptors for scans")
    p.add_argument("input", type=Path, help="scan file (.bin/.csv) or directory of scans")
    p.add_argument("--format", default="bin", choices=["bin", "csv"])

    p = sub.add_parser("eval", parents=[common], help="run detection over a sequence and score it")
    p.add_argument("scans", type=Path)
    p.add_argument("poses", type=Path)

    p = sub.add_parser("ablate", parents=[common], help="encoding x matcher ablation table")
    p.add_argument("scans", type=Path)
    p.add_argument("poses", type=Path)

    p = sub.add_parser("bench", parents=[common], help="timing of alignment and retrieval strategies")
    p.add_argument("scans", type=Path)
    p.add_argument("--strategies", default=",".join([s.value for s in AlignmentStrategy] + [s.value for s in RetrievalStrategy]))
    p.add_argument("--queries", type=int, default=20, help="number of query frames to time")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic KITTI-format sequence")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--revisits", type=int, default=30)
    p.add_argument("--revisit", default="reverse", choices=["reverse", "same", "arbitrary", "none"])
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--points", type=int, default=40000, help="point budget per scan")

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def descriptor_config(args) -> DescriptorConfig:
    return DescriptorConfig(
        num_rings=args.nr,
        num_sectors=args.ns,
        max_range=args.max_range,
        min_cell_points=args.min_cell_points,
        encoding=Encoding.parse(args.encoding),
        pca_enabled=args.pca == "on",
        downsample_leaf=args.leaf or None,
    )


def retrieval_config(args) -> RetrievalConfig:
    return RetrievalConfig(
        K=args.k,
        threshold=args.threshold,
        alignment_strategy=args.alignment,
        retrieval_strategy=args.retrieval,
        matcher=Matcher.parse(args.matcher),
    )


def gt_config(args) -> GroundTruthConfig:
    return GroundTruthConfig(revisit_radius=args.radius, exclusion_window=args.exclusion)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NDD_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# helpers

SCAN_SUFFIXES = (".bin", ".csv")


def list_scans(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise CommandError(f"{path}: no such file or directory")
    if (path / "velodyne").is_dir():
        path = path / "velodyne"
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in SCAN_SUFFIXES)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if hasattr(v, "value"):
        return v.value
    return v


def write_manifest(out: Path, args, inputs: dict, started: dt.datetime, extra: dict | None = None) -> None:
    manifest = {
        "tool": "ndd",
        "version": __version__,
        "command": args.command,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "descriptor_config": {k: _jsonable(v) for k, v in asdict(descriptor_config(args)).items()},
        "retrieval_config": {k: _jsonable(v) for k, v in asdict(retrieval_config(args)).items()},
        "ground_truth_config": asdict(gt_config(args)),
        "seed": args.seed,
        "started": started.isoformat(),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    _atomic_write_bytes(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())


def _load_sequence(args):
    scans = list_scans(args.scans)
    try:
        poses = load_poses(args.poses)
    except (OSError, MalformedFileError) as exc:
        raise CommandError(str(exc)) from exc
    if len(scans) != len(poses):
        raise CommandError(f"{len(scans)} scans in {args.scans} but {len(poses)} poses in {args.poses}")
    return scans, poses


# ---------------------------------------------------------------------------
# commands

def cmd_describe(args) -> None:
    started = dt.datetime.now(dt.timezone.utc)
    scans = list_scans(args.input)
    cfg = descriptor_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def one(path: Path) -> Descriptor:
        try:
            return build_descriptor(load_scan(path), cfg)
        except (OSError, ValueError) as exc:
            raise CommandError(f"{path}: {exc}") from exc

    try:
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            for path, desc in zip(scans, pool.map(one, scans)):
                if args.format == "bin":
                    target = args.out / f"{path.stem}.ndd"
                    save_descriptor(desc, target)
                else:
                    target = args.out / f"{path.stem}.csv"
                    _atomic_write_bytes(target, descriptor_to_csv(desc).encode())
                written.append(target)
    except CommandError:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    write_manifest(args.out, args, {"input": args.input}, started, {"outputs": len(written)})
    print(f"wrote {len(written)} descriptor(s) to {args.out}")


def cmd_eval(args) -> None:
    started = dt.datetime.now(dt.timezone.utc)
    scans, poses = _load_sequence(args)
    rcfg = retrieval_config(args)
    loaders = [partial(load_scan, p) for p in scans]
    try:
        res = run_sequence(loaders, poses, descriptor_config(args), rcfg, gt_config(args))
    except SequenceError as exc:
        raise CommandError(f"{scans[exc.frame]}: {exc.__cause__}") from exc
    except NoGroundTruthError as exc:
        raise CommandError(str(exc)) from exc
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{Encoding.parse(args.encoding).label}/{rcfg.matcher.label}/{rcfg.retrieval_strategy.value}"
    write_pr_curve(out / "pr_curve.csv", res.curve)
    write_metrics(out / "metrics.csv", [(tag, res.metrics)])
    write_detections(out / "detections.csv", res.records, rcfg.threshold)
    write_timing(out / "timing.csv", res.desc_ms, res.retrieval_ms)
    write_manifest(out, args, {"scans": args.scans, "poses": args.poses}, started)
    m = res.metrics
    print(f"F1 {m.f1:.3f}  EP {m.ep:.3f}  ({len(res.records)} queries, {sum(r.has_true_loop for r in res.records)} with true loops)")


def cmd_ablate(args) -> None:
    started = dt.datetime.now(dt.timezone.utc)
    scans, poses = _load_sequence(args)
    loaders = [partial(load_scan, p) for p in scans]
    try:
        rows = ablation_matrix(loaders, poses, descriptor_config(args), retrieval_config(args), gt_config(args))
    except SequenceError as exc:
        raise CommandError(f"{scans[exc.frame]}: {exc.__cause__}") from exc
    except NoGroundTruthError as exc:
        raise CommandError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "ablation.csv", ("config_tag", "encoding", "matcher", "f1", "ep"),
              ((r.tag, r.encoding.label, r.matcher.label, r.f1, r.ep) for r in rows))
    write_metrics(args.out / "metrics.csv", ((r.tag, Metrics(r.f1, r.ep)) for r in rows))
    write_manifest(args.out, args, {"scans": args.scans, "poses": args.poses}, started)
    for r in rows:
        print(f"{r.tag:10s} F1 {r.f1:.3f}  EP {r.ep:.3f}")


def cmd_bench(args) -> None:
    started = dt.datetime.now(dt.timezone.utc)
    scans = list_scans(args.scans)
    if not scans:
        raise CommandError(f"{args.scans}: no scans")
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    valid_a = {s.value for s in AlignmentStrategy}
    valid_r = {s.value for s in RetrievalStrategy}
    unknown = [n for n in names if n not in valid_a | valid_r]
    if unknown:
        raise CommandError(f"unknown strategies: {', '.join(unknown)}")
    dcfg, rcfg = descriptor_config(args), retrieval_config(args)
    try:
        descs, desc_ms = describe_sequence([partial(load_scan, p) for p in scans], dcfg)
    except SequenceError as exc:
        raise CommandError(f"{scans[exc.frame]}: {exc.__cause__}") from exc
    db = DescriptorDatabase(exclusion_window=args.exclusion)
    for i, d in enumerate(descs):
        db.insert(i, d)
    step = max(1, len(descs) // max(1, args.queries))
    queries = descs[::step][: args.queries]
    rows = bench_retrieval(
        db,
        queries,
        rcfg,
        alignments=[AlignmentStrategy(n) for n in names if n in valid_a],
        retrievals=[RetrievalStrategy(n) for n in names if n in valid_r],
    )
    args.out.mkdir(parents=True, exist_ok=True)
    table = [("description", "build_descriptor", float(np.mean(desc_ms)), len(descs))]
    table += [(r.kind, r.strategy, r.mean_ms, r.queries) for r in rows]
    write_csv(args.out / "bench.csv", ("kind", "strategy", "mean_ms", "samples"), table)
    write_manifest(args.out, args, {"scans": args.scans}, started, {"database_frames": len(db)})
    for kind, name, ms, n in table:
        print(f"{kind:12s} {name:18s} {ms:10.3f} ms  (n={n})")


def cmd_synth(args) -> None:
    from .synthbench import SceneSpec, export_kitti, loop_trajectory, planted_loop_sequence

    started = dt.datetime.now(dt.timezone.utc)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        probe = args.out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"{args.out}: not writable ({exc.strerror})") from exc
    scene = SceneSpec(seed=args.seed, noise_sigma=args.noise, points_per_scan=args.points, max_range=args.max_range)
    traj = loop_trajectory(num_frames=args.frames, num_revisits=args.revisits, revisit=args.revisit, seed=args.seed)
    seq = planted_loop_sequence(scene, traj, gt_config(args))
    export_kitti(seq, args.out)
    write_manifest(args.out, args, {}, started, {"scene": asdict(scene), "frames": args.frames, "revisit": args.revisit})
    print(f"wrote {len(seq.scans)} scans ({seq.truth.num_positives} with true loops) to {args.out}")


def cmd_serve(args) -> None:
    import uvicorn

    from .service.app import create_app

    app = create_app(descriptor_config(args), retrieval_config(args), args.exclusion)
    uvicorn.run(app, host=args.host, port=args.port)


COMMANDS = {
    "describe": cmd_describe,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "synth": cmd_synth,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        descriptor_config(args), retrieval_config(args), gt_config(args)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"ndd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
