"""Command-line entry point: ``alsstrat {plan,fetch,stats,prep,tile,eval}``.

Exit status is 0 when a command finished without errors, 2 when some
items failed, and 1 when nothing succeeded or the command could not run.
The cache root defaults to ``$ALSSTRAT_CACHE``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__, pipeline
from .config import load_config
from .exceptions import AlsStratError
from .ingest import CACHE_ENV


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="TOML config file")
    g.add_argument("--seed", type=int, help="master random seed")
    g.add_argument("--workers", type=int, help="parallel workers (default 8)")
    g.add_argument("--out", help="output directory (default ./out)")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="alsstrat",
        description="Stratified ALS tile selection, statistics, sample preparation, tiling and evaluation.",
        epilog=f"Environment: {CACHE_ENV} sets the download cache root.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("plan", parents=[common], help="label patches and write a sample manifest")
    p.add_argument("--corpus", help="corpus directory or base URL (backend.source)")
    p.add_argument("--rasters", help="directory with nlcd_<year> and dem rasters")
    p.add_argument("--cap", type=int, help="samples per project")
    p.add_argument("--patch-size", type=float)
    p.add_argument("--capture-year", type=int, help="fallback capture year")
    p.add_argument("--method", choices=["systematic", "reservoir"])

    p = sub.add_parser("fetch", parents=[common], help="download and crop manifest tiles")
    p.add_argument("--manifest", help="manifest path (default OUT/manifest.jsonl)")
    p.add_argument("--corpus", help="corpus directory or base URL")
    p.add_argument("--cache", help=f"cache directory (default ${CACHE_ENV})")

    p = sub.add_parser("stats", parents=[common], help="density, ground and return statistics")
    p.add_argument("--tiles", help="tile directory (default OUT/tiles)")
    p.add_argument("--subsample", type=float, help="fraction of tiles to use")

    p = sub.add_parser("prep", parents=[common], help="write masked BEV training samples")
    p.add_argument("--tiles")
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--samples-per-tile", type=int)

    p = sub.add_parser("tile", parents=[common], help="cut windows and split parents")
    p.add_argument("--tiles")
    p.add_argument("--window", type=float)
    p.add_argument("--stride", type=float)
    p.add_argument("--flush", action="store_true", default=None, help="add a final window flush with the edge")
    p.add_argument("--labels", help="CSV with parent_id,label")

    p = sub.add_parser("eval", parents=[common], help="IoU, mIoU and OA from label files")
    p.add_argument("--pred", required=True, help="predictions (CSV id,label or JSONL)")
    p.add_argument("--truth", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--strict", action="store_true", default=None, help="count undefined classes as 0")
    return parser


_OVERRIDES = {
    "corpus": ("backend", "source"),
    "cache": ("backend", "cache"),
    "rasters": ("plan", "rasters"),
    "cap": ("plan", "cap"),
    "patch_size": ("plan", "patch_size"),
    "capture_year": ("plan", "capture_year"),
    "method": ("plan", "method"),
    "subsample": ("stats", "subsample"),
    "mask_ratio": ("prep", "mask_ratio"),
    "voxel_size": ("prep", "voxel_size"),
    "samples_per_tile": ("prep", "samples_per_tile"),
    "window": ("tile", "window"),
    "stride": ("tile", "stride"),
    "flush": ("tile", "flush"),
    "labels": ("tile", "labels"),
    "num_classes": ("eval", "num_classes"),
    "strict": ("eval", "strict"),
}


def overrides_from_args(args: argparse.Namespace) -> dict:
    over: dict = {}
    for key in ("seed", "workers", "out"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    for attr, (section, key) in _OVERRIDES.items():
        val = getattr(args, attr, None)
        if val is not None:
            over.setdefault(section, {})[key] = val
    return over


def _print_summary(res: pipeline.CommandResult) -> None:
    if res.command == "plan":
        s = res.summary
        print(f"manifest: {s['total']} tiles from {s['projects']} projects")
        print(pipeline.format_counts(s))
    else:
        print(json.dumps(res.summary, indent=2, sort_keys=True, default=str))
    for err in res.errors:
        print(f"error: {err}", file=sys.stderr)


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, overrides_from_args(args))
    cmd = args.command
    if cmd == "plan":
        res = pipeline.plan(cfg)
    elif cmd == "fetch":
        res = pipeline.fetch(cfg, args.manifest)
    elif cmd == "stats":
        res = pipeline.stats(cfg, args.tiles)
    elif cmd == "prep":
        res = pipeline.prep(cfg, args.tiles)
    elif cmd == "tile":
        res = pipeline.tile(cfg, args.tiles)
    else:
        res = pipeline.evaluate(cfg, args.pred, args.truth)
    _print_summary(res)
    return res.exit_code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except (AlsStratError, OSError) as exc:
        print(f"alsstrat {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
