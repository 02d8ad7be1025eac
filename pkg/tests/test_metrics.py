"""Metrics against brute-force oracles: pairwise AUC, threshold sweeps, matching."""

import itertools

import numpy as np
import pytest

from milpf.metrics import (
    DEFAULT_SIZE_BUCKETS,
    EvalReport,
    ScoredBox,
    auc,
    balanced_accuracy,
    best_bacc_threshold,
    iou,
    make_report,
    map_at_iou,
    read_boxes_csv,
    spec_at_sens,
    write_boxes_csv,
)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def pairwise_auc(scores, labels):
    """Concordant pairs plus half ties over all positive-negative pairs."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def confusion_at(scores, labels, t):
    tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
    fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0)
    fn = sum(1 for s, l in zip(scores, labels) if s < t and l == 1)
    tn = sum(1 for s, l in zip(scores, labels) if s < t and l == 0)
    return tp, fp, fn, tn


def sweep_spec_at_sens(scores, labels, target):
    """Max specificity over every candidate threshold with sens >= target."""
    best = -1.0
    for t in sorted(set(scores)):
        tp, fp, fn, tn = confusion_at(scores, labels, t)
        if tp / (tp + fn) >= target:
            best = max(best, tn / (tn + fp))
    return best


def oracle_map(preds, gts, iou_thresh, size_buckets):
    """Independent greedy matcher + explicit precision/recall integration."""
    order = sorted(preds, key=lambda p: (-p.score, p.view_id, p.x0, p.y0, p.x1, p.y1))
    used = set()
    matches = []
    for p in order:
        candidates = []
        for j, gt in enumerate(gts.get(p.view_id, [])):
            if (p.view_id, j) in used:
                continue
            v = iou(p.box, gt)
            if v >= iou_thresh:
                candidates.append((v, -j))
        if candidates:
            v, negj = max(candidates)
            used.add((p.view_id, -negj))
            matches.append((p.view_id, -negj))
        else:
            matches.append(None)

    lo, hi = size_buckets

    def bucket(box):
        a = (box[2] - box[0]) * (box[3] - box[1])
        return 0 if a < lo else (1 if a < hi else 2)

    out = {}
    for name, want in (("mAP", None), ("mAP_s", 0), ("mAP_m", 1), ("mAP_l", 2)):
        n_gt = sum(1 for boxes in gts.values() for b in boxes
                   if want is None or bucket(b) == want)
        if n_gt == 0:
            out[name] = None
            continue
        tp = fp = 0
        pr = []
        for m in matches:
            if m is None:
                fp += 1
            else:
                b = gts[m[0]][m[1]]
                if want is not None and bucket(b) != want:
                    continue  # matched out-of-bucket: ignored
                tp += 1
            pr.append((tp / n_gt, tp / (tp + fp)))
        ap, prev_r = 0.0, 0.0
        for i, (r, _) in enumerate(pr):
            if r > prev_r:
                ap += (r - prev_r) * max(p for _, p in pr[i:])
                prev_r = r
        out[name] = ap
    return out


def random_detection_case(rng):
    views = [f"v{i}" for i in range(int(rng.integers(1, 3)))]
    gts = {}
    for v in views:
        boxes = []
        for _ in range(int(rng.integers(0, 4))):
            x0, y0 = rng.uniform(0, 50, size=2)
            w, h = rng.uniform(2, 80, size=2)
            boxes.append((float(x0), float(y0), float(x0 + w), float(y0 + h)))
        gts[v] = boxes
    preds = []
    for _ in range(int(rng.integers(0, 8))):
        v = views[int(rng.integers(0, len(views)))]
        if gts[v] and rng.random() < 0.6:  # perturb a GT box so matches occur
            x0, y0, x1, y1 = gts[v][int(rng.integers(0, len(gts[v])))]
            dx, dy = rng.uniform(-3, 3, size=2)
            box = (x0 + dx, y0 + dy, x1 + dx, y1 + dy)
        else:
            x0, y0 = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(2, 40, size=2)
            box = (float(x0), float(y0), float(x0 + w), float(y0 + h))
        preds.append(ScoredBox(*box, score=float(rng.random()), view_id=v))
    return preds, gts


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

class TestAuc:
    def test_exhaustive_small_cases(self):
        """All label patterns for n <= 8, randomized scores, >= 1000 cases."""
        rng = np.random.default_rng(0)
        cases = 0
        for rep in range(3):
            for n in range(2, 9):
                for pattern in itertools.product([0, 1], repeat=n):
                    if 0 < sum(pattern) < n:
                        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
                        assert auc(scores, pattern) == pytest.approx(
                            pairwise_auc(scores, pattern), abs=1e-12)
                        cases += 1
        assert cases >= 1000

    def test_perfect_and_inverted(self):
        assert auc([0.1, 0.9], [0, 1]) == 1.0
        assert auc([0.9, 0.1], [0, 1]) == 0.0
        assert auc([0.5, 0.5], [0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.9], [1, 1])


class TestThresholdMetrics:
    def test_balanced_accuracy_matches_confusion(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(4, 20))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            scores = np.round(rng.random(n), 1)
            t = float(rng.choice(scores))
            tp, fp, fn, tn = confusion_at(scores, labels, t)
            expected = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
            assert balanced_accuracy(scores, labels, t) == pytest.approx(expected, abs=1e-12)

    def test_best_bacc_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(4, 15))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            scores = np.round(rng.random(n), 1)
            t, b = best_bacc_threshold(scores, labels)
            sweep = [(balanced_accuracy(scores, labels, c), float(c))
                     for c in np.unique(scores)]
            best_b = max(v for v, _ in sweep)
            assert b == best_b
            # tie rule: largest threshold attaining exactly the best value
            assert t == max(c for v, c in sweep if v == best_b)

    def test_spec_at_sens_matches_sweep(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 200:
            n = int(rng.integers(4, 25))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            scores = np.round(rng.random(n), 1)
            target = float(rng.choice([0.5, 0.8, 0.9, 1.0]))
            spec, t = spec_at_sens(scores, labels, target)
            assert spec == pytest.approx(sweep_spec_at_sens(scores, labels, target), abs=1e-12)
            tp, fp, fn, tn = confusion_at(scores, labels, t)
            assert tp / (tp + fn) >= target
            checked += 1

    def test_spec_at_sens_bad_target(self):
        with pytest.raises(ValueError):
            spec_at_sens([0.1, 0.9], [0, 1], 0.0)

    def test_make_report_freezes_external_threshold(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        report = make_report(scores, labels, bacc_threshold=0.3)
        assert report.bacc_threshold == 0.3
        assert report.bacc == balanced_accuracy(scores, labels, 0.3)
        assert (report.n_pos, report.n_neg) == (2, 2)

    def test_report_json_round_trip(self):
        report = make_report([0.1, 0.9, 0.6], [0, 1, 1], 0.5)
        assert EvalReport.from_json(report.to_json()) == report


# ---------------------------------------------------------------------------
# Detection metrics
# ---------------------------------------------------------------------------

class TestIoU:
    def test_known_values(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
        assert iou((0, 0, 2, 2), (2, 0, 4, 2)) == 0.0  # touching edges
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a = tuple(np.sort(rng.uniform(0, 10, 2))) + (0.0,)
            ax = tuple(np.sort(rng.uniform(0, 10, 2)))
            ay = tuple(np.sort(rng.uniform(0, 10, 2)))
            bx = tuple(np.sort(rng.uniform(0, 10, 2)))
            by = tuple(np.sort(rng.uniform(0, 10, 2)))
            if ax[0] == ax[1] or ay[0] == ay[1] or bx[0] == bx[1] or by[0] == by[1]:
                continue
            a = (ax[0], ay[0], ax[1], ay[1])
            b = (bx[0], by[0], bx[1], by[1])
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0


class TestMapAtIoU:
    def test_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            preds, gts = random_detection_case(rng)
            got = map_at_iou(preds, gts, 0.25)
            want = oracle_map(preds, gts, 0.25, DEFAULT_SIZE_BUCKETS)
            for key in ("mAP", "mAP_s", "mAP_m", "mAP_l"):
                if want[key] is None:
                    assert got[key] is None
                else:
                    assert got[key] == pytest.approx(want[key], abs=1e-12)

    def test_perfect_detection(self):
        gts = {"v": [(0.0, 0.0, 10.0, 10.0), (20.0, 0.0, 40.0, 30.0)]}
        preds = [ScoredBox(0, 0, 10, 10, score=0.9, view_id="v"),
                 ScoredBox(20, 0, 40, 30, score=0.8, view_id="v")]
        out = map_at_iou(preds, gts)
        assert out["mAP"] == 1.0

    def test_empty_bucket_is_none(self):
        gts = {"v": [(0.0, 0.0, 10.0, 10.0)]}  # area 100: small bucket only
        out = map_at_iou([], gts)
        assert out["mAP"] == 0.0
        assert out["mAP_s"] == 0.0
        assert out["mAP_m"] is None and out["mAP_l"] is None

    def test_one_gt_matched_once(self):
        gts = {"v": [(0.0, 0.0, 10.0, 10.0)]}
        preds = [ScoredBox(0, 0, 10, 10, score=0.9, view_id="v"),
                 ScoredBox(0, 0, 10, 10, score=0.8, view_id="v")]
        out = map_at_iou(preds, gts)
        assert out["mAP"] == 1.0  # second duplicate is a FP after recall 1.0

    def test_wrong_view_never_matches(self):
        gts = {"a": [(0.0, 0.0, 10.0, 10.0)]}
        preds = [ScoredBox(0, 0, 10, 10, score=0.9, view_id="b")]
        assert map_at_iou(preds, gts)["mAP"] == 0.0

    def test_degenerate_scored_box_rejected(self):
        with pytest.raises(ValueError):
            ScoredBox(5, 0, 5, 10, score=0.5, view_id="v")


class TestBoxCsv:
    def test_round_trip(self, tmp_path):
        boxes = [ScoredBox(0.0, 1.5, 8.0, 9.25, score=0.75, view_id="v1"),
                 ScoredBox(3.0, 3.0, 4.0, 4.0, score=0.5, view_id="v2")]
        path = tmp_path / "boxes.csv"
        write_boxes_csv(path, boxes)
        assert read_boxes_csv(path) == boxes
        header = path.read_text().splitlines()[0]
        assert header == "view_id,x0,y0,x1,y1,score"
