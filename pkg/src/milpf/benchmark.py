"""Seeded sparse-signal benchmark: MIL vs ablations on synthetic embeddings.

A benchmark seed fixes one synthetic dataset (600 bags, d=32, 20-200 tiles
per view, 1-3 planted signal tiles per positive bag). Three arms train on
it with the same sweep protocol (8 runs, best-validation-AUC selection):

* ``mil``        - max global aggregation + attention local aggregation,
* ``sil_mean``   - global stream only, trained per view with inherited bag
                   labels, bag score = mean of per-view probabilities,
* ``mean_local`` - like ``mil`` but with mean local aggregation.

The module exists so scripts and tests exercise the exact same protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .embedset import EmbedDataset, SynthConfig, synth_dataset_with_truth
from .milhead import HeadParams, forward
from .trainer import RunResult, TrainConfig, multi_run

BENCHMARK_SEEDS = (7, 8, 9, 10, 11)

MIL_CONFIG = TrainConfig(
    global_agg="max", local_agg="attention",
    lr=3e-3, epochs=150, runs=8, seed=100,
)
SIL_CONFIG = replace(MIL_CONFIG, global_agg="mean", local_agg="none", mode="sil_mean")
MEAN_LOCAL_CONFIG = replace(MIL_CONFIG, local_agg="mean")

ARMS = {"mil": MIL_CONFIG, "sil_mean": SIL_CONFIG, "mean_local": MEAN_LOCAL_CONFIG}


@dataclass
class SeedResult:
    """Benchmark outcome for one dataset seed."""

    seed: int
    test_auc: dict[str, float]          # arm name -> best-run test AUC
    val_auc: dict[str, float]           # arm name -> best-run validation AUC
    localization_rate: float            # top-attention-tile hit rate, mil arm
    mil_best: RunResult


def benchmark_dataset(seed: int) -> tuple[EmbedDataset, dict]:
    """The fixed synthetic dataset (and planted truth) for one seed."""
    return synth_dataset_with_truth(SynthConfig(seed=seed))


def localization_rate(
    data: EmbedDataset, truth: dict, params: HeadParams, cfg: TrainConfig
) -> float:
    """Fraction of positive test bags whose highest-attention tile was planted."""
    positives = [b for b in data.split("test") if b.label == 1]
    if not positives:
        raise ValueError("no positive test bags")
    hits = 0
    for bag in positives:
        _, weights = forward(bag, params, cfg.agg_config)
        if weights is None:
            raise ValueError("localization requires an attention local stream")
        hits += int(np.argmax(weights)) in truth["signal_tiles"][bag.bag_id]
    return hits / len(positives)


def run_seed(seed: int, jobs: int = 1) -> SeedResult:
    """All three arms on one seed's dataset; sweep protocol per arm."""
    data, truth = benchmark_dataset(seed)
    test_auc: dict[str, float] = {}
    val_auc: dict[str, float] = {}
    mil_best: RunResult | None = None
    for name, cfg in ARMS.items():
        best, _ = multi_run(data, cfg, jobs=jobs)
        test_auc[name] = best.test_metrics.auc
        val_auc[name] = best.val_auc
        if name == "mil":
            mil_best = best
    loc = localization_rate(data, truth, mil_best.params, MIL_CONFIG)
    return SeedResult(seed=seed, test_auc=test_auc, val_auc=val_auc,
                      localization_rate=loc, mil_best=mil_best)


def run_benchmark(seeds=BENCHMARK_SEEDS, jobs: int = 1) -> list[SeedResult]:
    return [run_seed(s, jobs=jobs) for s in seeds]


def summarize(results: list[SeedResult]) -> dict:
    """Aggregate pass/fail inputs: per-arm AUCs, win counts, mean margins."""
    out: dict = {"seeds": [r.seed for r in results]}
    for arm in ARMS:
        out[f"{arm}_test_auc"] = [r.test_auc[arm] for r in results]
    for arm in ("sil_mean", "mean_local"):
        margins = [r.test_auc["mil"] - r.test_auc[arm] for r in results]
        out[f"wins_over_{arm}"] = int(sum(m > 0 for m in margins))
        out[f"mean_margin_over_{arm}"] = float(np.mean(margins))
    out["min_mil_test_auc"] = min(r.test_auc["mil"] for r in results)
    out["localization_rates"] = [r.localization_rate for r in results]
    return out


__all__ = [
    "ARMS", "BENCHMARK_SEEDS", "MIL_CONFIG", "SIL_CONFIG", "MEAN_LOCAL_CONFIG",
    "SeedResult", "benchmark_dataset", "localization_rate", "run_seed",
    "run_benchmark", "summarize",
]
