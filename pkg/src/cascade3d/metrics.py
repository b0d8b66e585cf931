"""3D detection AP / mAP and 2D segmentation mIoU."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from .data import IGNORE
from .geom3d import iou3d_matrix

MAP_THRESHOLDS = tuple(round(0.25 + 0.05 * i, 2) for i in range(15))
INTERPOLATION = "all-point, monotone precision envelope"


def _by_scene(items):
    """Accept either a flat list (one scene) or a mapping scene -> list."""
    if isinstance(items, dict):
        return items
    return {0: list(items)}


def average_precision(tp_flags, n_gt: int) -> float:
    """Area under the monotone precision envelope of a ranked TP/FP list."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp_flags, dtype=float)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def _class_records(dets, gts, cls):
    """Ranked detections of one class with their IoUs to same-scene GTs."""
    records = []  # (score, order, scene, ious-to-gt-of-class)
    n_gt = 0
    order = 0
    for scene in sorted(set(dets) | set(gts), key=str):
        g = [np.asarray(b, dtype=float) for b, c in gts.get(scene, []) if c == cls]
        n_gt += len(g)
        d = [(np.asarray(b, dtype=float), s) for b, c, s in dets.get(scene, []) if c == cls]
        if not d:
            continue
        ious = iou3d_matrix([b for b, _ in d], g) if g else np.zeros((len(d), 0))
        for k, (_, s) in enumerate(d):
            records.append((float(s), order, scene, ious[k]))
            order += 1
    records.sort(key=lambda r: (-r[0], r[1]))
    return records, n_gt


def _greedy_flags(records, thresh):
    used = defaultdict(set)
    flags = []
    for _, _, scene, ious in records:
        best, best_iou = -1, -1.0
        for j, v in enumerate(ious):
            if v >= thresh and j not in used[scene] and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[scene].add(best)
        flags.append(best >= 0)
    return flags


def classes_of(gts) -> list[int]:
    return sorted({int(c) for items in gts.values() for _, c in items})


def match_and_ap(dets, gts, iou_thresh: float) -> dict[int, float]:
    """Per-class AP at one IoU threshold.

    ``dets``: scene -> [(box7, class, score)], ``gts``: scene -> [(box7, class)]
    (a flat list is treated as a single scene). Each detection, in score
    order, takes the still-unmatched GT of its class with the highest IoU at
    or above the threshold; otherwise it is a false positive. Classes absent
    from the GT are left out.
    """
    dets, gts = _by_scene(dets), _by_scene(gts)
    out = {}
    for cls in classes_of(gts):
        records, n_gt = _class_records(dets, gts, cls)
        out[cls] = average_precision(_greedy_flags(records, iou_thresh), n_gt)
    return out


def map_range(dets, gts, thresholds=MAP_THRESHOLDS):
    """AP for every threshold in 0.25:0.05:0.95 and the mean of class means."""
    dets, gts = _by_scene(dets), _by_scene(gts)
    per_class = {}
    class_mean = {}
    cached = {cls: _class_records(dets, gts, cls) for cls in classes_of(gts)}
    for t in thresholds:
        aps = {cls: average_precision(_greedy_flags(rec, t), n) for cls, (rec, n) in cached.items()}
        per_class[t] = aps
        class_mean[t] = float(np.mean(list(aps.values()))) if aps else float("nan")
    mean = float(np.mean([class_mean[t] for t in thresholds])) if cached else float("nan")
    return {"per_threshold": per_class, "class_mean": class_mean, "mean": mean}


class ConfusionMatrix:
    """Accumulates pixel counts; IGNORE pixels are skipped."""

    def __init__(self, n_labels: int):
        self.n = n_labels
        self.counts = np.zeros((n_labels, n_labels), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        keep = gt != IGNORE
        idx = gt[keep] * self.n + pred[keep]
        self.counts += np.bincount(idx, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    def iou(self):
        tp = np.diag(self.counts).astype(float)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        present = self.counts.sum(axis=1) > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            per = tp / (tp + fp + fn)
        per_class = {c: float(per[c]) for c in range(self.n) if present[c]}
        mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
        return per_class, mean


def miou(pred, gt, n_labels: int):
    """Per-class IoU and mean over classes that occur in ``gt``."""
    return ConfusionMatrix(n_labels).update(pred, gt).iou()


def build_report(dets, gts, miou_value=None, runtime_s=None, class_names=None) -> dict:
    res = map_range(dets, gts)
    per_class_ap = {}
    for t, aps in res["per_threshold"].items():
        for cls, ap in aps.items():
            name = class_names[cls] if class_names else str(cls)
            per_class_ap.setdefault(name, {})[f"{t:.2f}"] = ap
    return {
        "interpolation": INTERPOLATION,
        "per_class_ap": per_class_ap,
        "ap": {f"{t:.2f}": res["class_mean"][t] for t in (0.25, 0.5, 0.75)},
        "map_range": res["mean"],
        "miou": miou_value,
        "runtime_s": runtime_s,
    }
