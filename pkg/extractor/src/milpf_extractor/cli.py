"""Extractor command line.

Exit codes: 0 success, 1 usage error, 2 data/extraction error.
"""

from __future__ import annotations

import argparse
import sys

from .adapter import ADAPTERS, make_adapter
from .extract import ExtractionError, extract_dataset
from .overlay import render_overlay
from .tiles import ForegroundRule


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="milpf-extract", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", help="encode a manifest of images into a container")
    s.add_argument("--manifest", required=True,
                   help="CSV: patient_id,bag_id,view_id,image_path,label")
    s.add_argument("--out", required=True, help="container output directory")
    s.add_argument("--adapter", choices=sorted(ADAPTERS), default="toy")
    s.add_argument("--embed-dim", type=int, default=16)
    s.add_argument("--tile-size", type=int, default=64)
    s.add_argument("--intensity-threshold", type=float, default=0.05)
    s.add_argument("--min-foreground", type=float, default=0.01)

    s = sub.add_parser("overlay", help="render a PGM heatmap over its source image")
    s.add_argument("--image", required=True)
    s.add_argument("--heatmap", required=True, help="binary P5 PGM heatmap")
    s.add_argument("--out", required=True, help="PNG output path")
    s.add_argument("--alpha", type=float, default=0.5)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        if args.command == "extract":
            adapter = make_adapter(args.adapter, embed_dim=args.embed_dim)
            rule = ForegroundRule(args.intensity_threshold, args.min_foreground)
            out = extract_dataset(args.manifest, adapter, rule, args.out,
                                  tile_size=args.tile_size)
            print(f"wrote container to {out}")
        else:
            render_overlay(args.image, args.heatmap, args.out, args.alpha)
            print(f"wrote overlay to {args.out}")
    except (ExtractionError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
