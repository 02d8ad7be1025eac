"""Command-line entry point binding dataset, training, and explain tools.

Exit codes: 0 success, 1 usage error, 2 data/validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import explain, metrics, milhead, trainer
from .embedset import (
    DatasetError,
    SynthConfig,
    read_dataset,
    split_patients,
    synth_dataset,
    write_dataset,
)
from .milhead import count_params, forward, load_checkpoint, save_checkpoint
from .tilegeom import GridSpec, tile_grid

USAGE_EXIT = 1
DATA_EXIT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pair(text: str) -> tuple[int, int]:
    lo, hi = (int(v) for v in text.split(","))
    return lo, hi


def _ratios(text: str) -> tuple[float, float, float]:
    parts = tuple(float(v) for v in text.split(","))
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated ratios, got {text!r}")
    return parts


def build_parser() -> _Parser:
    p = _Parser(prog="milpf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic sparse-signal dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-bags", type=int, default=600)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--views", type=_pair, default=(2, 4), metavar="LO,HI")
    s.add_argument("--tiles", type=_pair, default=(20, 200), metavar="LO,HI")
    s.add_argument("--signal-tiles", type=_pair, default=(1, 3), metavar="LO,HI")
    s.add_argument("--shift", type=float, default=2.0)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--tile-size", type=int, default=32)
    s.add_argument("--positive-rate", type=float, default=0.5)

    s = sub.add_parser("validate", help="validate a dataset container")
    s.add_argument("--data", required=True)

    s = sub.add_parser("split", help="recompute patient-grouped splits in place")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--ratios", type=_ratios, default=(0.7, 0.1, 0.2))

    s = sub.add_parser("train", help="one training run from a config file")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint output path")
    s.add_argument("--log", help="optional epoch,train_loss,val_auc CSV")

    s = sub.add_parser("sweep", help="multi-run selection protocol")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--runs", type=int, help="override the config run count")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--report", required=True, help="JSON report output path")
    s.add_argument("--mode", choices=trainer.MODES, default="mil")

    s = sub.add_parser("heatmap", help="write per-view attention heatmaps as PGM")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--bag", required=True)
    s.add_argument("--overlap", type=float, default=0.75,
                   help="tile overlap the container was extracted with (documentation)")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("detect", help="extract scored boxes from a PGM heatmap")
    s.add_argument("--heatmap", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True, help="CSV output path")

    s = sub.add_parser("grid", help="print the tile grid for an image")
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--tile", type=int, required=True)
    s.add_argument("--overlap", type=float, default=0.0)

    s = sub.add_parser("params", help="print the trainable-parameter count")
    s.add_argument("--config", required=True)
    s.add_argument("--dim", type=int, required=True)
    return p


def _cmd_synth(args) -> None:
    cfg = SynthConfig(
        n_bags=args.n_bags, d=args.dim, views_per_bag_range=args.views,
        tiles_per_view_range=args.tiles,
        signal_tiles_per_positive_range=args.signal_tiles,
        signal_shift=args.shift, noise_scale=args.noise, seed=args.seed,
        tile_size=args.tile_size, positive_rate=args.positive_rate,
    )
    dataset = synth_dataset(cfg)
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.bags)} bags (d={dataset.embed_dim}) to {args.out}")


def _cmd_validate(args) -> None:
    dataset = read_dataset(args.data)
    n_tiles = sum(b.n_tiles for b in dataset.bags)
    print(f"ok: {len(dataset.bags)} bags, {n_tiles} tiles, d={dataset.embed_dim}")


def _cmd_split(args) -> None:
    dataset = read_dataset(args.data)
    dataset.split_assignments = split_patients(dataset.bags, args.ratios, args.seed)
    write_dataset(dataset, args.data)
    sizes = {name: len(dataset.split(name)) for name in ("train", "val", "test")}
    print(f"splits: {sizes}")


def _cmd_train(args) -> None:
    dataset = read_dataset(args.data)
    cfg = trainer.read_train_config(args.config)
    result = trainer.train_once(dataset, cfg)
    save_checkpoint(args.out, result.params, cfg.agg_config, dataset.embed_dim)
    if args.log:
        trainer.write_run_log(args.log, result)
    line = f"seed={result.seed} val_auc={result.val_auc:.6f}"
    if result.test_metrics:
        line += f" test_auc={result.test_metrics.auc:.6f}"
    print(line)


def _cmd_sweep(args) -> None:
    dataset = read_dataset(args.data)
    cfg = trainer.read_train_config(args.config)
    if args.runs is not None:
        from dataclasses import replace
        cfg = replace(cfg, runs=args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best, results = trainer.multi_run(dataset, cfg, jobs=args.jobs)
    for r in results:
        trainer.write_run_log(out / f"run_{r.seed}.csv", r)
    save_checkpoint(out / "best_model.milpf", best.params, cfg.agg_config,
                    dataset.embed_dim)
    report = {
        "best_seed": best.seed,
        "best_epoch": best.best_epoch,
        "best_val_auc": best.val_auc,
        "best_test_metrics": asdict(best.test_metrics) if best.test_metrics else None,
        "spread": trainer.sweep_summary(results),
        "runs": [
            {"seed": r.seed, "val_auc": r.val_auc, "best_epoch": r.best_epoch,
             "test_metrics": asdict(r.test_metrics) if r.test_metrics else None}
            for r in results
        ],
    }
    (out / "sweep_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"best seed {best.seed}: val_auc={best.val_auc:.6f}; report in {out}")


def _cmd_eval(args) -> None:
    dataset = read_dataset(args.data)
    params, agg_cfg, d = load_checkpoint(args.model)
    if d != dataset.embed_dim:
        raise DatasetError(
            f"model expects d={d}, dataset has d={dataset.embed_dim}")
    cfg = trainer.TrainConfig(
        global_agg=agg_cfg.global_agg, local_agg=agg_cfg.local_agg, mode=args.mode)
    report = trainer.evaluate(dataset, params, cfg)
    Path(args.report).write_text(report.to_json())
    print(f"test auc={report.auc:.6f} bacc={report.bacc:.6f} "
          f"spec@sens0.9={report.spec_at_sens90:.6f}")


def _cmd_heatmap(args) -> None:
    dataset = read_dataset(args.data)
    params, agg_cfg, d = load_checkpoint(args.model)
    if agg_cfg.local_agg != "attention":
        raise DatasetError("heatmaps require a checkpoint with a local attention stream")
    bags = {b.bag_id: b for b in dataset.bags}
    if args.bag not in bags:
        raise DatasetError(f"bag {args.bag!r} not found in dataset")
    bag = bags[args.bag]
    _, weights = forward(bag, params, agg_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vi, view in enumerate(bag.views):
        pairs = [(g, float(w)) for g, w in zip(bag.tile_geoms, weights)
                 if g.view_index == vi]
        hm = explain.attention_heatmap(view, pairs)
        hm.view_id = view.view_id
        explain.write_pgm(out / f"{bag.bag_id}_{view.view_id}.pgm", hm)
    print(f"wrote {len(bag.views)} heatmaps to {out}")


def _cmd_detect(args) -> None:
    hm = explain.read_pgm(args.heatmap)
    boxes = explain.boxes_from_heatmap(hm, args.threshold)
    metrics.write_boxes_csv(args.out, boxes)
    print(f"{len(boxes)} boxes -> {args.out}")


def _cmd_grid(args) -> None:
    spec = GridSpec(args.width, args.height, args.tile, args.overlap)
    for t in tile_grid(spec):
        print(f"{t.x0} {t.y0} {t.x1} {t.y1}")


def _cmd_params(args) -> None:
    cfg = trainer.read_train_config(args.config)
    print(count_params(cfg.agg_config, args.dim))


COMMANDS = {
    "synth": _cmd_synth,
    "validate": _cmd_validate,
    "split": _cmd_split,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "eval": _cmd_eval,
    "heatmap": _cmd_heatmap,
    "detect": _cmd_detect,
    "grid": _cmd_grid,
    "params": _cmd_params,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_EXIT
    try:
        COMMANDS[args.command](args)
    except (DatasetError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
