"""Command-line entry point: ``boxkit simulate | nms | bench | verify``.

Exit codes: 0 success, 1 I/O or bad input data, 2 usage or config error,
3 property failure.  Progress goes to stderr, results to files and stdout.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nms
from .detections_io import (DetectionFormatError, channels, load_detections, write_detections,
                            write_results)
from .losses import LossKind
from .simulation import SimulationConfig, load_config, run_simulation, write_curve_csv, write_map_csv

logger = logging.getLogger("boxkit")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_PROPERTY = 0, 1, 2, 3

LOSS_CHOICES = tuple(k.value for k in LossKind)


class UsageError(Exception):
    pass


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("BOXKIT_SEED")
    if env is None or not env.strip():
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"BOXKIT_SEED must be an integer, got {env!r}") from None


def _losses(text: str) -> list[str]:
    names = [t.strip().lower() for t in text.split(",") if t.strip()]
    if names == ["all"]:
        return list(LOSS_CHOICES)
    bad = [n for n in names if n not in LOSS_CHOICES]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"invalid loss {','.join(bad) or text!r}; choose from {', '.join(LOSS_CHOICES)} or all")
    return names


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0.0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


# --- simulate ------------------------------------------------------------------


def _simulation_config(args) -> SimulationConfig:
    config = SimulationConfig.full_scale() if args.full_scale else SimulationConfig()
    if args.config:
        config = load_config(args.config, config)
    overrides = {}
    if args.points is not None:
        overrides["n_points"] = args.points
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.layout is not None:
        overrides["layout"] = args.layout
    if args.exact_diagonal:
        overrides["detach_diagonal"] = False
    return replace(config, **overrides)


def cmd_simulate(args) -> int:
    try:
        config = _simulation_config(args)
    except ValueError as exc:
        raise UsageError(f"bad simulation config: {exc}") from None
    seed = _seed(args.seed)
    losses = args.loss or [config.loss_kind.value]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    totals = []
    for name in losses:
        cfg = replace(config, loss_kind=name)
        start = time.perf_counter()
        table = run_simulation(cfg, seed=seed, workers=args.workers)
        elapsed = time.perf_counter() - start
        target = out_dir if len(losses) == 1 else out_dir / name
        target.mkdir(parents=True, exist_ok=True)
        write_curve_csv(table, target / "curve.csv")
        write_map_csv(table, target / "map.csv")
        logger.info("%s done in %.1fs, wrote %s", name, elapsed, target)
        totals.append((name, table.initial_sum, table.final_sum))

    print("loss,initial_error_sum,final_error_sum")
    for name, initial, final in totals:
        print(f"{name},{initial:.6g},{final:.6g}")
    return EXIT_OK


# --- nms -----------------------------------------------------------------------


def _method_params(args) -> dict:
    params = {"eps": args.eps}
    if args.t_cap is not None:
        params["t_cap"] = args.t_cap
    if args.sigma is not None:
        params["sigma"] = args.sigma
    if args.beta is not None:
        params["beta"] = args.beta
    if args.score_floor is not None:
        params["score_floor"] = args.score_floor
    return params


def cmd_nms(args) -> int:
    detections = load_detections(args.input, args.format)
    chans = channels(detections)
    logger.info("loaded %d channels, %d detections from %s",
                len(chans), sum(len(c) for c in chans), args.input)
    results = nms.run_channels(args.method, chans, workers=args.workers, **_method_params(args))
    pairs = list(zip(chans, results))
    written = write_results(args.output, pairs, args.format,
                            include_original=args.method in nms.MERGING_METHODS)

    per_image: dict[str, list[int]] = {}
    iters = []
    for dets, res in pairs:
        kept, total, worst = per_image.setdefault(dets.image_id, [0, 0, 0])
        per_image[dets.image_id] = [kept + int(res.keep.keep.sum()), total + len(dets),
                                    max(worst, res.keep.iterations_used)]
        iters.append(res.keep.iterations_used)
    print("image_id,kept,total,max_iterations")
    for image_id, (kept, total, worst) in per_image.items():
        print(f"{image_id},{kept},{total},{worst}")
    if iters:
        logger.info("iterations_used: mean %.2f, median %g, max %d over %d channels",
                    float(np.mean(iters)), float(np.median(iters)), max(iters), len(iters))
    logger.info("wrote %d detections to %s", written, args.output)
    return EXIT_OK


# --- bench ---------------------------------------------------------------------

SEQUENTIAL_METHODS = frozenset({"original", "weighted"})
BENCH_METHODS = ("original", "fast", "cluster", "cluster-d", "cluster-s", "cluster-s+d",
                 "weighted", "cluster-w", "cluster-w+d")


def synthetic_channels(kind: str, seed: int, n_images: int = 20) -> list[nms.DetectionSet]:
    """Bench inputs: ``disjoint`` grids or ``dense`` overlapping clusters."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_images):
        if kind == "disjoint":
            side = int(rng.integers(3, 12))
            gx, gy = np.meshgrid(np.arange(side), np.arange(side))
            x1 = gx.ravel() * 20.0 + rng.uniform(0.0, 4.0, side * side)
            y1 = gy.ravel() * 20.0 + rng.uniform(0.0, 4.0, side * side)
            w = rng.uniform(5.0, 14.0, side * side)
            h = rng.uniform(5.0, 14.0, side * side)
            boxes = np.column_stack([x1, y1, x1 + w, y1 + h])
        elif kind == "dense":
            n_obj = int(rng.integers(2, 8))
            per = rng.integers(5, 40, size=n_obj)
            parts = []
            for c, m in zip(rng.uniform(0.0, 300.0, size=(n_obj, 2)), per):
                size = rng.uniform(30.0, 80.0, 2)
                centers = c + rng.normal(0.0, 0.15, size=(m, 2)) * size
                sizes = size * rng.uniform(0.8, 1.25, size=(m, 2))
                parts.append(np.hstack([centers - sizes / 2, centers + sizes / 2]))
            boxes = np.vstack(parts)
        else:
            raise UsageError(f"unknown synthetic input {kind!r}")
        scores = rng.uniform(0.05, 1.0, size=len(boxes))
        out.append(nms.DetectionSet.from_arrays(boxes, scores, image_id=f"{kind}-{k}"))
    return out


def cmd_bench(args) -> int:
    if args.input:
        chans = channels(load_detections(args.input, args.format))
    else:
        chans = synthetic_channels(args.synthetic, _seed(args.seed))
    methods = args.methods or list(BENCH_METHODS)
    params = _method_params(args)
    n_boxes = sum(len(c) for c in chans)
    bounds = [nms.largest_cluster_size(c, args.eps) if len(c) else 0 for c in chans]

    rows = []
    for method in methods:
        start = time.perf_counter()
        results = nms.run_channels(method, chans, workers=args.workers, **params)
        elapsed = time.perf_counter() - start
        iters = [r.keep.iterations_used for r in results]
        # sequential methods take one step per box; the cluster bound is not theirs
        over = "" if method in SEQUENTIAL_METHODS else sum(
            1 for it, b, c in zip(iters, bounds, chans) if len(c) and it > b)
        rows.append({
            "method": method,
            "channels": len(chans),
            "boxes": n_boxes,
            "mean_iterations": f"{float(np.mean(iters)):.4g}" if iters else "",
            "median_iterations": f"{float(np.median(iters)):g}" if iters else "",
            "max_iterations": max(iters) if iters else "",
            "bound_violations": over,
            "seconds": f"{elapsed:.6f}",
            "boxes_per_sec": f"{n_boxes / elapsed:.1f}" if elapsed > 0 else "",
        })
        logger.info("%s: %.3fs", method, elapsed)

    fh = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# --- verify --------------------------------------------------------------------


def _slug(name: str) -> str:
    keep = [ch if ch.isalnum() else "-" for ch in name.lower()]
    return "-".join(filter(None, "".join(keep).split("-")))[:60]


def cmd_verify(args) -> int:
    from . import verify

    seed = _seed(args.seed)
    sizes = verify.VerifySizes.full() if args.full else verify.VerifySizes()
    reports = verify.run_all(seed, sizes, inject_fault=args.inject_fault)
    for rep in reports:
        print(rep.line())

    failed = [r for r in reports if not r.passed]
    dump_dir = Path(args.dump_dir or "counterexamples")
    for rep in reports:
        sets = verify.counterexample_sets(rep)
        # a passing report may still carry documented discrepancies worth replaying
        if not sets or (rep.passed and args.dump_dir is None):
            continue
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / f"{_slug(rep.name)}.jsonl"
        write_detections(path, sets)
        print(f"counterexamples for {rep.name!r}: {path}")
    return EXIT_PROPERTY if failed else EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxkit", description="Box regression losses and NMS workbench.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the anchor regression simulation")
    p.add_argument("--loss", type=_losses, help="iou, giou, diou, ciou, a comma list, or all")
    p.add_argument("--points", type=_positive_int)
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--seed", type=int, help="defaults to $BOXKIT_SEED, then 0")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--layout", choices=("random", "sunflower"))
    p.add_argument("--full-scale", action="store_true", help="start from the 5000-point setup")
    p.add_argument("--exact-diagonal", action="store_true",
                   help="differentiate through the enclosing diagonal in updates")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    def nms_options(p):
        p.add_argument("--eps", type=_unit_interval, default=nms.DEFAULT_EPS)
        p.add_argument("--sigma", type=_positive_float)
        p.add_argument("--beta", type=_positive_float)
        p.add_argument("--t-cap", type=_positive_int)
        p.add_argument("--score-floor", type=float)
        p.add_argument("--format", choices=("jsonl", "csv"))
        p.add_argument("--workers", type=_positive_int, default=1)

    p = sub.add_parser("nms", help="suppress a detection file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--method", choices=sorted(nms.METHODS), default="cluster")
    nms_options(p)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("bench", help="iteration counts and throughput per method")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("input", nargs="?")
    src.add_argument("--synthetic", choices=("disjoint", "dense"))
    p.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(",") if m.strip()],
                   help=f"comma list from {', '.join(BENCH_METHODS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    nms_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--seed", type=int)
    p.add_argument("--full", action="store_true", help="acceptance-size suites")
    p.add_argument("--inject-fault", choices=("nms", "gradient"), help="sabotage a suite (harness check)")
    p.add_argument("--dump-dir", help="where counterexample files go (default ./counterexamples)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if args.command == "bench" and args.methods:
        unknown = [m for m in args.methods if m not in nms.METHODS]
        if unknown:
            parser.error(f"unknown method(s) {', '.join(unknown)}")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"boxkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DetectionFormatError as exc:
        print(f"boxkit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"boxkit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"boxkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
