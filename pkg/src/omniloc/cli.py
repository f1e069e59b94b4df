"""Command-line entry point: build, query, serve, bench, synth, experiment."""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .aggregation import AggregationParams, bin_candidates
from .feature import K, FeatureError, OmniFeature, extract_feature, load_image, read_profiles
from .geodb import (DatabaseError, FeatureDatabase, Subspace, build_subspace, database_from_subspaces,
                    load_database, read_manifest, save_database)
from .pipeline import localization_to_dict, localize
from .retrieval import QueryBundle, RetrievalParams, select_nearby_frames

log = logging.getLogger("omniloc")

EXIT_ERROR = 1
EXIT_DB_LOAD = 3
EXIT_BIND = 4

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm", ".ppm"}


class CliError(Exception):
    pass


def _add_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--M", type=int, default=11, help="frames per query bundle (odd)")
    p.add_argument("--N", type=int, default=15, help="candidates per (frame, subspace)")
    p.add_argument("--top-c", type=int, default=10)
    p.add_argument("--toler-per", type=float, default=0.20)
    p.add_argument("--radius-m", type=float, default=3.0)
    p.add_argument("--workers", type=int, default=None, help="worker budget (default: $OMNILOC_WORKERS or CPU count)")


def _params(args) -> tuple[RetrievalParams, AggregationParams]:
    try:
        return (RetrievalParams(n=args.N, worker_budget=args.workers),
                AggregationParams(top_c=args.top_c, toler_per=args.toler_per, radius_m=args.radius_m))
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _image_frames(directory: Path) -> list[np.ndarray]:
    if not directory.is_dir():
        raise CliError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise CliError(f"{directory}: no image files")
    return [load_image(p) for p in files]


def cmd_build(args) -> int:
    sources = [("images", Path(d)) for d in args.images or []] + [("profiles", Path(f)) for f in args.profiles or []]
    if not sources:
        raise CliError("give at least one --images DIR or --profiles FILE")
    if len(sources) != len(args.manifest):
        raise CliError(f"{len(sources)} inputs but {len(args.manifest)} manifests; pair them one to one")
    subs: list[Subspace] = []
    for i, ((kind, src), man) in enumerate(zip(sources, args.manifest), start=1):
        frames = _image_frames(src) if kind == "images" else read_profiles(src)
        manifest = read_manifest(man)
        subs.append(build_subspace(frames, manifest, i, Path(man).stem))
        log.info("subspace %d (%s): %d frames", i, Path(man).stem, len(frames))
    db = database_from_subspaces(subs, grid=tuple(args.grid) if args.grid else None)
    save_database(db, args.out)
    print(json.dumps({"out": str(args.out), "subspaces": len(subs), "frames": db.n_frames,
                      "grid": [db.grid_width, db.grid_height], "K": db.k}))
    return 0


def cmd_query(args) -> int:
    db = load_database(args.db)
    rparams, aparams = _params(args)
    feats = [extract_feature(p, db.k) for p in read_profiles(args.profiles)]
    frames = range(len(feats)) if args.frame == "all" else [int(args.frame)]
    for m in frames:
        try:
            bundle = select_nearby_frames(feats, m, args.M)
        except (IndexError, ValueError) as exc:
            raise CliError(str(exc)) from None
        loc = localize(db, bundle, rparams, aparams)
        out = {"frame": m}
        out.update(localization_to_dict(loc))
        print(json.dumps(out))
        if args.grid_csv:
            grid = bin_candidates(loc.candidates, db.grid_width, db.grid_height)
            Path(args.grid_csv).write_text(grid.to_csv(), encoding="utf-8")
    return 0


def cmd_serve(args) -> int:
    from .service import LocalizationServer, parse_bind

    try:
        db = load_database(args.db)
    except (OSError, DatabaseError) as exc:
        print(f"omniloc: cannot load database: {exc}", file=sys.stderr)
        return EXIT_DB_LOAD
    try:
        server = LocalizationServer(parse_bind(args.bind), db, args.workers)
    except (OSError, ValueError) as exc:
        print(f"omniloc: cannot bind {args.bind}: {exc}", file=sys.stderr)
        return EXIT_BIND
    host, port = server.server_address[:2]
    print(json.dumps({"listening": f"{host}:{port}", "frames": db.n_frames}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def random_database(n_frames: int, n_subspaces: int = 5, k: int = K, grid=(200, 200), seed: int = 0) -> FeatureDatabase:
    """Unit-norm random descriptors on random tiles; for throughput tests."""
    rng = np.random.default_rng(seed)
    sizes = np.full(n_subspaces, n_frames // n_subspaces)
    sizes[: n_frames % n_subspaces] += 1
    subs = []
    for i, n in enumerate(sizes, start=1):
        f = np.abs(rng.normal(size=(n, k)))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        xy = np.stack([rng.integers(0, grid[0], n), rng.integers(0, grid[1], n)], axis=1)
        subs.append(Subspace(i, f"random{i}", f, np.zeros(n, bool), xy))
    return FeatureDatabase(tuple(subs), grid[0], grid[1], k=k)


def cmd_bench(args) -> int:
    if args.db:
        db = load_database(args.db)
    elif args.random_frames:
        db = random_database(args.random_frames, seed=args.seed)
    else:
        raise CliError("give --db DB or --random-frames N")
    rparams, aparams = _params(args)
    rng = np.random.default_rng(args.seed)

    # bundles are perturbed runs of consecutive stored frames
    def make_bundle():
        s = db.subspaces[rng.integers(len(db.subspaces))]
        m = min(args.M, len(s))
        start = int(rng.integers(0, len(s) - m + 1))
        q = s.features[start:start + m] + np.abs(rng.normal(scale=0.01, size=(m, db.k)))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        return QueryBundle(tuple(OmniFeature(row) for row in q), center_index=m // 2)

    bundles = [make_bundle() for _ in range(args.queries + args.warmup)]
    for b in bundles[: args.warmup]:
        localize(db, b, rparams, aparams)
    ret, agg = [], []
    t0 = time.perf_counter()
    for b in bundles[args.warmup:]:
        loc = localize(db, b, rparams, aparams)
        ret.append(loc.retrieve_ms)
        agg.append(loc.aggregate_ms)
    wall = time.perf_counter() - t0

    def stats(xs):
        return {"mean": statistics.fmean(xs), "p50": float(np.percentile(xs, 50)), "p95": float(np.percentile(xs, 95))}

    print(json.dumps({
        "frames": db.n_frames, "subspaces": len(db.subspaces), "K": db.k, "M": args.M, "N": args.N,
        "workers": rparams.workers(), "queries": args.queries,
        "localizations_per_sec": args.queries / wall,
        "retrieve_ms": stats(ret), "aggregate_ms": stats(agg),
    }))
    return 0


def cmd_synth(args) -> int:
    from .synthbench import SynthSpec, default_spec, write_dataset

    spec = SynthSpec.load(args.spec) if args.spec else default_spec()
    print(json.dumps(write_dataset(spec, args.out)))
    return 0


def cmd_experiment(args) -> int:
    from .synthbench import SynthSpec, default_spec, run_experiment, run_self_queries

    spec = SynthSpec.load(args.spec) if args.spec else default_spec()
    report = run_experiment(spec, M=args.M, N=args.N, P=args.P)
    out = report.to_dict()
    if args.self_queries:
        _, tiles = run_self_queries(spec, M=args.M, N=args.N, P=args.P)
        out["self_query_within_1_tile"] = float(np.mean(np.asarray(tiles) <= 1))
    if args.errors_csv:
        with open(args.errors_csv, "w", encoding="utf-8") as fh:
            fh.write("query,error_m\n")
            fh.writelines(f"{i},{e!r}\n" for i, e in enumerate(report.errors_m))
    if not args.verbose_errors:
        out.pop("errors_m")
        out.pop("candidate_counts")
    print(json.dumps(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omniloc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a feature database from panoramas or profiles")
    p.add_argument("--images", action="append", metavar="DIR", help="directory of panoramas (one subspace)")
    p.add_argument("--profiles", action="append", metavar="FILE", help="PROFILE v1 file (one subspace)")
    p.add_argument("--manifest", action="append", required=True, metavar="FILE", help="frame,x,y anchors")
    p.add_argument("--grid", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="localize frames of a profile sequence offline")
    p.add_argument("--db", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--frame", default="0", help="frame index, or 'all' for one JSON line per frame")
    p.add_argument("--grid-csv", help="write the density grid of the (last) query as CSV")
    _add_params(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("serve", help="run the TCP localization service")
    p.add_argument("--db", required=True)
    p.add_argument("--bind", default="127.0.0.1:7531", help="HOST:PORT")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="measure end-to-end localization throughput")
    p.add_argument("--db")
    p.add_argument("--random-frames", type=int, help="bench a random in-memory database of this size")
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    _add_params(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="render a synthetic floor dataset")
    p.add_argument("--spec", help="SynthSpec JSON (default: built-in spec)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", help="run the synthetic accuracy/throughput experiment")
    p.add_argument("--spec", help="SynthSpec JSON (default: built-in spec)")
    p.add_argument("--M", type=int, default=11)
    p.add_argument("--N", type=int, default=15)
    p.add_argument("--P", type=int, default=5)
    p.add_argument("--self-queries", action="store_true", help="also report training-frame self-localization")
    p.add_argument("--errors-csv")
    p.add_argument("--verbose-errors", action="store_true", help="include per-query arrays in the JSON")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FeatureError, DatabaseError, OSError, ValueError) as exc:
        print(f"omniloc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
