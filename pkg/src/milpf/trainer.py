"""Full-batch head training, run selection, and the SIL ablation.

Every split of the embeddings dataset fits in one batch, so each epoch is
one Adam step on the whole train split followed by a validation-AUC probe.
A run keeps the parameters from its best validation epoch; a sweep runs
many seeds and keeps the run with the best validation AUC. Validation AUC
saturates easily on small validation splits, so AUC ties (within a run and
across runs) are broken by the lower validation cross-entropy.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics
from .backprop import PackedBags, bag_logits, loss_and_grad
from .embedset import EmbedBag, EmbedDataset
from .milhead import (
    AggConfig,
    HeadParams,
    copy_params,
    flatten_params,
    init_params,
    sigmoid,
    unflatten_params,
)

MODES = ("mil", "sil_mean", "sil_max")


@dataclass(frozen=True)
class TrainConfig:
    global_agg: str = "max"
    local_agg: str = "attention"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 300
    seed: int = 0
    init_scale: float = 1.0
    runs: int = 36
    mode: str = "mil"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.runs < 1:
            raise ValueError("epochs and runs must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode != "mil" and self.local_agg != "none":
            raise ValueError("SIL modes train the global stream only (local_agg=none)")

    @property
    def agg_config(self) -> AggConfig:
        if self.mode == "mil":
            return AggConfig(global_agg=self.global_agg, local_agg=self.local_agg)
        # SIL trains on single-view examples; the singleton aggregation is a no-op
        return AggConfig(global_agg="mean", local_agg="none")


def read_train_config(path: str | Path) -> TrainConfig:
    """Parse a flat key=value config file; '#' starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kwargs[key] = (int(value) if types[key] == "int"
                       else float(value) if types[key] == "float"
                       else value)
    return TrainConfig(**kwargs)


def write_train_config(path: str | Path, cfg: TrainConfig) -> None:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(TrainConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class RunResult:
    params: HeadParams
    val_auc: float
    val_loss: float
    test_metrics: metrics.EvalReport | None
    loss_history: list[float]
    val_auc_history: list[float]
    seed: int
    best_epoch: int


class AdamState:
    """Flat-vector Adam with bias correction."""

    def __init__(self, n_params: int, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _check_split(bags: list[EmbedBag], name: str) -> None:
    if not bags:
        raise ValueError(f"{name} split is empty")
    labels = {b.label for b in bags}
    if labels != {0, 1}:
        raise ValueError(f"{name} split contains a single class; AUC undefined")


def _single_view_bags(bags: list[EmbedBag]) -> tuple[list[EmbedBag], list[int]]:
    """One pseudo-bag per view, inheriting the bag label; returns group sizes."""
    out, sizes = [], []
    d = bags[0].global_embeds.shape[1]
    for bag in bags:
        for n, view in enumerate(bag.views):
            out.append(EmbedBag(
                bag_id=f"{bag.bag_id}#v{n}",
                patient_id=bag.patient_id,
                label=bag.label,
                views=[view],
                global_embeds=bag.global_embeds[n:n + 1],
                tile_embeds=np.empty((0, d), dtype=np.float32),
                tile_geoms=[],
            ))
        sizes.append(bag.n_views)
    return out, sizes


def _make_scorer(bags: list[EmbedBag], cfg: TrainConfig):
    """Scoring closure with the bag packing done once up front."""
    agg = cfg.agg_config
    if cfg.mode == "mil":
        packed = PackedBags(bags)

        def score(params: HeadParams) -> np.ndarray:
            return np.asarray(sigmoid(bag_logits(packed, params, agg)))
    else:
        views, sizes = _single_view_bags(bags)
        packed = PackedBags(views)
        reduce = np.mean if cfg.mode == "sil_mean" else np.max

        def score(params: HeadParams) -> np.ndarray:
            probs = np.asarray(sigmoid(bag_logits(packed, params, agg)))
            out, pos = [], 0
            for n in sizes:
                out.append(reduce(probs[pos:pos + n]))
                pos += n
            return np.asarray(out)

    return score


def score_bags(bags: list[EmbedBag], params: HeadParams, cfg: TrainConfig) -> np.ndarray:
    """Bag-level probability scores under the config's inference rule."""
    return _make_scorer(bags, cfg)(params)


def evaluate(data: EmbedDataset, params: HeadParams, cfg: TrainConfig) -> metrics.EvalReport:
    """Test-split report with the bACC threshold frozen on the validation split."""
    val, test = data.split("val"), data.split("test")
    _check_split(val, "val")
    _check_split(test, "test")
    val_scores = score_bags(val, params, cfg)
    thresh, _ = metrics.best_bacc_threshold(val_scores, [b.label for b in val])
    test_scores = score_bags(test, params, cfg)
    return metrics.make_report(test_scores, [b.label for b in test], thresh)


def _val_bce(scores: np.ndarray, labels: list[int]) -> float:
    """Cross-entropy of probability scores, clipped away from 0 and 1."""
    p = np.clip(np.asarray(scores, dtype=float), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _train_loop(data: EmbedDataset, cfg: TrainConfig, seed: int,
                train_examples: list[EmbedBag]) -> RunResult:
    val = data.split("val")
    _check_split(val, "val")
    agg = cfg.agg_config
    rng = np.random.default_rng(seed)
    params = init_params(agg, data.embed_dim, rng, cfg.init_scale)
    theta = flatten_params(params)
    adam = AdamState(theta.size, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    val_labels = [b.label for b in val]
    train_packed = PackedBags(train_examples)
    val_score = _make_scorer(val, cfg)

    loss_history: list[float] = []
    val_history: list[float] = []
    best = (-1.0, np.inf, 0, theta)
    for epoch in range(cfg.epochs):
        params = unflatten_params(theta, params)
        loss, grad = loss_and_grad(train_packed, None, params, agg)
        loss_history.append(loss)
        theta = adam.step(theta, flatten_params(grad))
        params = unflatten_params(theta, params)
        scores = val_score(params)
        val_auc = metrics.auc(scores, val_labels)
        val_history.append(val_auc)
        val_loss = _val_bce(scores, val_labels)
        # AUC ties keep the lower validation loss; exact ties the earliest epoch
        if val_auc > best[0] or (val_auc == best[0] and val_loss < best[1]):
            best = (val_auc, val_loss, epoch, theta.copy())

    best_params = unflatten_params(best[3], params)
    result = RunResult(
        params=best_params,
        val_auc=best[0],
        val_loss=best[1],
        test_metrics=None,
        loss_history=loss_history,
        val_auc_history=val_history,
        seed=seed,
        best_epoch=best[2],
    )
    if data.split("test"):
        result.test_metrics = evaluate(data, best_params, cfg)
    return result


def train_once(data: EmbedDataset, cfg: TrainConfig, seed: int | None = None) -> RunResult:
    """One full-batch training run; keeps the best-validation-epoch parameters."""
    if seed is None:
        seed = cfg.seed
    if cfg.mode != "mil":
        return train_sil(data, cfg, seed)
    train = data.split("train")
    _check_split(train, "train")
    return _train_loop(data, cfg, seed, train)


def train_sil(data: EmbedDataset, cfg: TrainConfig, seed: int | None = None) -> RunResult:
    """Single-instance ablation: views train with inherited bag labels.

    Bag scores at inference aggregate per-view probabilities by mean or max
    according to the mode; validation selection uses those bag scores.
    """
    if cfg.mode not in ("sil_mean", "sil_max"):
        raise ValueError("train_sil requires mode sil_mean or sil_max")
    if seed is None:
        seed = cfg.seed
    train = data.split("train")
    _check_split(train, "train")
    train_views, _ = _single_view_bags(train)
    return _train_loop(data, cfg, seed, train_views)


def _run_for_seed(args) -> RunResult:
    data, cfg, seed = args
    return train_once(data, cfg, seed)


def multi_run(
    data: EmbedDataset, cfg: TrainConfig, jobs: int = 1
) -> tuple[RunResult, list[RunResult]]:
    """cfg.runs independent runs with seeds seed, seed+1, ...

    Returns (best, all) where best has the highest validation AUC; AUC ties
    go to the lowest validation loss, then to the lowest seed. Runs are
    independent, so jobs > 1 executes them in
    worker processes; the selection is order-independent either way.
    """
    seeds = [cfg.seed + i for i in range(cfg.runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_for_seed, [(data, cfg, s) for s in seeds]))
    else:
        results = [train_once(data, cfg, s) for s in seeds]
    best = max(results, key=lambda r: (r.val_auc, -r.val_loss, -r.seed))
    return best, results


def sweep_summary(results: list[RunResult]) -> dict:
    """Run-to-run spread of the selection metric and test metrics."""
    val = [r.val_auc for r in results]
    out = {
        "runs": len(results),
        "val_auc_min": min(val),
        "val_auc_max": max(val),
        "val_auc_spread": max(val) - min(val),
    }
    tests = [r.test_metrics for r in results if r.test_metrics is not None]
    if tests:
        for key in ("auc", "spec_at_sens90"):
            vals = [getattr(t, key) for t in tests]
            out[f"test_{key}_min"] = min(vals)
            out[f"test_{key}_max"] = max(vals)
            out[f"test_{key}_spread"] = max(vals) - min(vals)
    return out


def write_run_log(path: str | Path, result: RunResult) -> None:
    """Line-oriented CSV log: epoch, train_loss, val_auc."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_auc"])
        for epoch, (loss, auc_) in enumerate(
                zip(result.loss_history, result.val_auc_history)):
            writer.writerow([epoch, repr(float(loss)), repr(float(auc_))])
