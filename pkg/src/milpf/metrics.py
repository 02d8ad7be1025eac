"""Classification and detection metrics.

Classification: rank-based AUC, balanced accuracy at a threshold, and
specificity at a sensitivity floor, all on the empirical (step-function)
ROC with no interpolation. Detection: IoU and size-bucketed average
precision with greedy score-ordered matching.

The decision rule everywhere is `score >= threshold => positive`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

Box = tuple[float, float, float, float]  # x0, y0, x1, y1


@dataclass
class EvalReport:
    auc: float
    bacc: float
    bacc_threshold: float
    spec_at_sens90: float
    operating_threshold: float
    n_pos: int
    n_neg: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class ScoredBox:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float
    view_id: str

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def box(self) -> Box:
        return (self.x0, self.y0, self.x1, self.y1)


def _check_classes(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    return n_pos, n_neg


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: concordant pairs plus half the ties, via midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_classes(labels)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _confusion(scores, labels, threshold):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    return tp, fp, fn, tn


def balanced_accuracy(scores, labels, threshold: float) -> float:
    """(sensitivity + specificity) / 2 at the given threshold."""
    _check_classes(np.asarray(labels))
    tp, fp, fn, tn = _confusion(scores, labels, threshold)
    return 0.5 * (tp / (tp + fn) + tn / (tn + fp))


def best_bacc_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximizing balanced accuracy; ties go to the largest threshold."""
    _check_classes(np.asarray(labels))
    best = (-1.0, None)
    candidates = np.unique(np.asarray(scores, dtype=np.float64))
    for t in candidates[::-1]:
        b = balanced_accuracy(scores, labels, t)
        if b > best[0]:
            best = (b, float(t))
    return best[1], best[0]


def spec_at_sens(scores, labels, target_sens: float = 0.9) -> tuple[float, float]:
    """Maximal specificity over thresholds reaching sensitivity >= target.

    Equivalently the largest threshold on the empirical ROC whose
    sensitivity still clears the floor. Returns (specificity, threshold).
    """
    if not (0.0 < target_sens <= 1.0):
        raise ValueError("target_sens must lie in (0, 1]")
    labels = np.asarray(labels)
    _check_classes(labels)
    candidates = np.unique(np.asarray(scores, dtype=np.float64))
    for t in candidates[::-1]:
        tp, fp, fn, tn = _confusion(scores, labels, t)
        if tp / (tp + fn) >= target_sens:
            return tn / (tn + fp), float(t)
    raise AssertionError("unreachable: minimum score threshold has sensitivity 1")


def make_report(test_scores, test_labels, bacc_threshold: float,
                target_sens: float = 0.9) -> EvalReport:
    """Full classification report on test scores at a pre-chosen bACC threshold."""
    labels = np.asarray(test_labels)
    n_pos, n_neg = _check_classes(labels)
    spec, op_thresh = spec_at_sens(test_scores, labels, target_sens)
    return EvalReport(
        auc=auc(test_scores, labels),
        bacc=balanced_accuracy(test_scores, labels, bacc_threshold),
        bacc_threshold=float(bacc_threshold),
        spec_at_sens90=spec,
        operating_threshold=op_thresh,
        n_pos=n_pos,
        n_neg=n_neg,
    )


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    """Intersection over union of two half-open boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


DEFAULT_SIZE_BUCKETS = (32 * 32, 96 * 96)  # area thresholds: small < 32^2 <= medium < 96^2 <= large


def _box_area(b: Box) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def _ap_from_flags(flags: list[str], n_gt: int) -> float | None:
    """All-point-interpolated AP from ordered per-prediction 'tp'/'fp'/'ignore' flags."""
    if n_gt == 0:
        return None
    tp = fp = 0
    recalls, precisions = [], []
    for f in flags:
        if f == "ignore":
            continue
        if f == "tp":
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    ap = 0.0
    prev_r = 0.0
    for i, r in enumerate(recalls):
        if r > prev_r:
            ap += (r - prev_r) * max(precisions[i:])  # precision envelope
            prev_r = r
    return ap


def map_at_iou(
    preds: list[ScoredBox],
    gts: dict[str, list[Box]],
    iou_thresh: float = 0.25,
    size_buckets: tuple[float, float] = DEFAULT_SIZE_BUCKETS,
) -> dict[str, float | None]:
    """Average precision overall and per GT size bucket.

    Predictions are matched greedily in descending score order to the
    unmatched same-view GT of highest IoU (>= iou_thresh, ties by GT index).
    Bucketed APs restrict the GT set to the bucket; predictions matched to
    an out-of-bucket GT count neither as TP nor FP. Buckets with no GT are
    reported as None.
    """
    order = sorted(preds, key=lambda p: (-p.score, p.view_id, p.x0, p.y0, p.x1, p.y1))
    matched: dict[tuple[str, int], bool] = {}
    assignments: list[tuple[str, int] | None] = []
    for p in order:
        boxes = gts.get(p.view_id, [])
        best_iou, best_j = 0.0, None
        for j, gt in enumerate(boxes):
            if matched.get((p.view_id, j)):
                continue
            v = iou(p.box, gt)
            if v >= iou_thresh and v > best_iou:
                best_iou, best_j = v, j
        if best_j is None:
            assignments.append(None)
        else:
            matched[(p.view_id, best_j)] = True
            assignments.append((p.view_id, best_j))

    lo, hi = size_buckets

    def bucket_of(box: Box) -> str:
        a = _box_area(box)
        return "s" if a < lo else ("m" if a < hi else "l")

    out: dict[str, float | None] = {}
    for name, member in (
        ("mAP", lambda b: True),
        ("mAP_s", lambda b: bucket_of(b) == "s"),
        ("mAP_m", lambda b: bucket_of(b) == "m"),
        ("mAP_l", lambda b: bucket_of(b) == "l"),
    ):
        n_gt = sum(1 for boxes in gts.values() for b in boxes if member(b))
        flags = []
        for p, a in zip(order, assignments):
            if a is None:
                flags.append("fp")
            elif member(gts[a[0]][a[1]]):
                flags.append("tp")
            else:
                flags.append("ignore")
        out[name] = _ap_from_flags(flags, n_gt)
    return out


# ---------------------------------------------------------------------------
# Box CSV interchange
# ---------------------------------------------------------------------------

BOX_CSV_FIELDS = ["view_id", "x0", "y0", "x1", "y1", "score"]


def write_boxes_csv(path: str | Path, boxes: list[ScoredBox]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BOX_CSV_FIELDS)
        for b in boxes:
            writer.writerow([b.view_id, b.x0, b.y0, b.x1, b.y1, b.score])


def read_boxes_csv(path: str | Path) -> list[ScoredBox]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            ScoredBox(x0=float(r["x0"]), y0=float(r["y0"]), x1=float(r["x1"]),
                      y1=float(r["y1"]), score=float(r["score"]), view_id=r["view_id"])
            for r in reader
        ]
