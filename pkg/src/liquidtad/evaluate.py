"""Temporal detection metrics: IoU, per-class AP and mAP over IoU thresholds."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction

THUMOS_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def iou(a, b):
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


@dataclass
class EvalResult:
    thresholds: list
    map_per_threshold: dict
    avg_map: float
    per_class_ap: dict = field(default_factory=dict)   # class -> {threshold: ap}

    def to_dict(self):
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "per_class_ap": {str(c): {f"{t:.2f}": ap for t, ap in aps.items()}
                             for c, aps in sorted(self.per_class_ap.items())},
            "map_per_threshold": {f"{t:.2f}": m for t, m in self.map_per_threshold.items()},
            "avg_map": self.avg_map,
        }

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        if csv_path:
            with open(csv_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["class"] + [f"{t:.2f}" for t in self.thresholds])
                for c, aps in sorted(self.per_class_ap.items()):
                    w.writerow([c] + [repr(aps[t]) for t in self.thresholds])
                w.writerow(["mAP"] + [repr(self.map_per_threshold[t]) for t in self.thresholds])
                w.writerow(["avg_mAP", repr(self.avg_map)])


def _match(preds, gts, thr):
    """Greedy matching of score-sorted predictions.

    ``preds``: list of (video_id, segment) already sorted by descending score.
    Each prediction takes the highest-IoU unmatched ground truth in its video
    with IoU >= thr.  Returns a list of 1/0 hit flags.
    """
    used = {vid: [False] * len(segs) for vid, segs in gts.items()}
    hits = []
    for vid, p in preds:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(vid, ())):
            if used[vid][j]:
                continue
            o = iou(p, g)
            if o >= thr and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[vid][best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    return hits


def average_precision_exact(hits, n_gt):
    """All-point AP as an exact fraction.

    Recall rises by 1/n_gt at every hit; each rise is weighted by the best
    precision at that rank or any later one (the monotone envelope).
    """
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    best = Fraction(0)
    total = Fraction(0)
    tp = sum(hits)
    # walk from the last rank backwards so the running max is the envelope
    for k in range(len(hits), 0, -1):
        best = max(best, Fraction(tp, k))
        if hits[k - 1]:
            total += best
            tp -= 1
    return total / n_gt


def average_precision(hits, n_gt):
    """All-point AP, correctly rounded to float."""
    return float(average_precision_exact(hits, n_gt))


def evaluate(predictions, ground_truth, thresholds=THUMOS_THRESHOLDS):
    """mAP of ``predictions`` against ``ground_truth``.

    Both are mappings ``video_id -> list[ActionSegment]``.  Predictions are
    ranked per class by descending score (stable on ties, in video-id then
    list order).  Classes without any ground-truth instance are skipped.
    """
    thresholds = [float(t) for t in thresholds]
    if any(not 0.0 < t < 1.0 for t in thresholds) or thresholds != sorted(thresholds):
        raise ValueError("thresholds must be ascending within (0, 1)")
    classes = sorted({g.class_id for segs in ground_truth.values() for g in segs})
    if not classes:
        raise ValueError("ground truth contains no segments")
    per_class = {}
    for c in classes:
        gts = {vid: [g for g in segs if g.class_id == c] for vid, segs in ground_truth.items()}
        n_gt = sum(len(v) for v in gts.values())
        preds = [(vid, p) for vid in sorted(predictions) for p in predictions[vid] if p.class_id == c]
        preds.sort(key=lambda vp: -vp[1].score)
        per_class[c] = {t: average_precision_exact(_match(preds, gts, t), n_gt) for t in thresholds}
    # exact averages, rounded once
    map_exact = {t: sum(per_class[c][t] for c in classes) / len(classes) for t in thresholds}
    avg = float(sum(map_exact.values()) / len(thresholds))
    return EvalResult(thresholds, {t: float(m) for t, m in map_exact.items()}, avg,
                      {c: {t: float(ap) for t, ap in aps.items()} for c, aps in per_class.items()})
