"""Classification and segmentation metrics, PR curves and confidence intervals.

Ratios are computed from integer counts with the division last.  A ratio
whose denominator is zero evaluates to 0 and is listed in ``degenerate``;
the one exception is region overlap of two empty masks, which is 1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import MetricError, ShapeError

WILSON_Z = 1.959964


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(predictions, truths, positive_class: int = 1) -> ConfusionCounts:
    pred = np.asarray(predictions).ravel()
    true = np.asarray(truths).ravel()
    if pred.shape != true.shape:
        raise ShapeError(f"confusion: {pred.size} predictions vs {true.size} truths")
    pp = pred == positive_class
    tpos = true == positive_class
    return ConfusionCounts(
        tp=int(np.count_nonzero(pp & tpos)),
        tn=int(np.count_nonzero(~pp & ~tpos)),
        fp=int(np.count_nonzero(pp & ~tpos)),
        fn=int(np.count_nonzero(~pp & tpos)),
    )


def _ratio(num, den, name: str, degenerate: list) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def classification_metrics(c: ConfusionCounts) -> dict:
    """Accuracy, precision, recall, specificity, F-score and MCC.

    MCC uses the standard denominator sqrt((tp+fp)(tp+fn)(tn+fp)(tn+fn)).
    """
    if c.total <= 0:
        raise MetricError("classification metrics need at least one counted sample")
    deg: list[str] = []
    acc = _ratio(c.tp + c.tn, c.total, "accuracy", deg)
    prec = _ratio(c.tp, c.tp + c.fp, "precision", deg)
    rec = _ratio(c.tp, c.tp + c.fn, "recall", deg)
    spec = _ratio(c.tn, c.tn + c.fp, "specificity", deg)
    # 2PR/(P+R) rewritten over integer counts so the only division is the last step
    f = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f_score", deg)
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        deg.append("mcc")
        mcc = 0.0
    else:
        mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)
    return {
        "accuracy": acc,
        "precision": prec,
        "recall": rec,
        "specificity": spec,
        "f_score": f,
        "mcc": mcc,
        "degenerate": deg,
    }


# -------------------------------------------------------------- regions


def _check_masks(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for m, name in ((pred, "prediction"), (gt, "ground truth")):
        if m.size and not np.isin(m, (0, 1)).all():
            raise MetricError(f"{name} mask must be binary (values in {{0, 1}})")
    return pred.astype(np.uint8), gt.astype(np.uint8)


@dataclass
class ClassRegionCounts:
    """Pixel tallies for one class of one image."""

    intersection: int
    pred: int
    gt: int

    @property
    def union(self) -> int:
        return self.pred + self.gt - self.intersection


def region_counts(pred_mask, gt_mask, classes=(0, 1)) -> list[ClassRegionCounts]:
    pred, gt = _check_masks(pred_mask, gt_mask)
    out = []
    for c in classes:
        p = pred == c
        g = gt == c
        out.append(ClassRegionCounts(int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))))
    return out


def iou_dice_accuracy(k: ClassRegionCounts) -> tuple[float, float, float]:
    """(IoU, Dice, class accuracy); empty-vs-empty gives IoU = Dice = 1."""
    if k.union == 0:
        iou = dice = 1.0
    else:
        iou = k.intersection / k.union
        dice = 2 * k.intersection / (k.pred + k.gt)
    acc = k.intersection / k.gt if k.gt else 0.0
    return iou, dice, acc


def region_metrics(pred_mask, gt_mask) -> dict:
    """Per-class (background=0, infected=1) accuracy, IoU and Dice."""
    result = {}
    for cls, k in zip((0, 1), region_counts(pred_mask, gt_mask)):
        iou, dice, acc = iou_dice_accuracy(k)
        result[cls] = {"accuracy": acc, "iou": iou, "dice": dice, "degenerate": k.gt == 0}
    return result


def dice_score(pred_mask, gt_mask, cls: int = 1) -> float:
    return iou_dice_accuracy(region_counts(pred_mask, gt_mask, (cls,))[0])[1]


def boundary(region: np.ndarray) -> np.ndarray:
    """Region pixels with at least one 4-neighbour inside the image but outside the region."""
    r = np.asarray(region, dtype=bool)
    outside = np.zeros_like(r)
    outside[1:, :] |= ~r[:-1, :]
    outside[:-1, :] |= ~r[1:, :]
    outside[:, 1:] |= ~r[:, :-1]
    outside[:, :-1] |= ~r[:, 1:]
    return r & outside


def default_bf_tolerance(shape) -> int:
    h, w = shape[:2]
    return max(1, math.ceil(0.0075 * math.hypot(h, w)))


def _within(src: np.ndarray, target: np.ndarray, tol: float) -> int:
    """Count of ``src`` pixels lying within Euclidean distance ``tol`` of any ``target`` pixel."""
    if not target.any():
        return 0
    dist = ndimage.distance_transform_edt(~target)
    return int(np.count_nonzero(dist[src] <= tol))


def bf_score(pred_mask, gt_mask, tolerance_px=None) -> dict:
    """Boundary F1 per class.

    Precision is the fraction of predicted boundary pixels within
    ``tolerance_px`` of the ground-truth boundary, recall the converse.  Both
    boundaries empty gives 1; exactly one empty gives 0.
    """
    pred, gt = _check_masks(pred_mask, gt_mask)
    tol = default_bf_tolerance(gt.shape) if tolerance_px is None else tolerance_px
    scores = {}
    for c in (0, 1):
        pb = boundary(pred == c)
        gb = boundary(gt == c)
        n_p, n_g = int(pb.sum()), int(gb.sum())
        if n_p == 0 and n_g == 0:
            scores[c] = 1.0
            continue
        if n_p == 0 or n_g == 0:
            scores[c] = 0.0
            continue
        precision = _within(pb, gb, tol) / n_p
        recall = _within(gb, pb, tol) / n_g
        scores[c] = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return scores


@dataclass
class ImageSegResult:
    counts: list[ClassRegionCounts]
    bf: dict
    pixels: int


def evaluate_image(pred_mask, gt_mask, tolerance_px=None) -> ImageSegResult:
    counts = region_counts(pred_mask, gt_mask)
    return ImageSegResult(counts, bf_score(pred_mask, gt_mask, tolerance_px), int(np.asarray(gt_mask).size))


def aggregate_segmentation(results: list[ImageSegResult]) -> dict:
    """Dataset-level G_Acc, M_Acc, M_IoU, W_IoU and M_BFS.

    Pixel tallies are pooled over all images before dividing; the BF score is
    averaged per class over images, then over classes.
    """
    if not results:
        raise MetricError("aggregate_segmentation needs at least one evaluated image")
    n_cls = len(results[0].counts)
    inter = [sum(r.counts[c].intersection for r in results) for c in range(n_cls)]
    predc = [sum(r.counts[c].pred for r in results) for c in range(n_cls)]
    gtc = [sum(r.counts[c].gt for r in results) for c in range(n_cls)]
    total = sum(r.pixels for r in results)
    per_class = []
    for c in range(n_cls):
        iou, dice, acc = iou_dice_accuracy(ClassRegionCounts(inter[c], predc[c], gtc[c]))
        bf = sum(r.bf[c] for r in results) / len(results)
        per_class.append({"accuracy": acc, "iou": iou, "dice": dice, "bf_score": bf, "gt_pixels": gtc[c]})
    return {
        "g_acc": sum(inter) / total,
        "m_acc": sum(pc["accuracy"] for pc in per_class) / n_cls,
        "m_iou": sum(pc["iou"] for pc in per_class) / n_cls,
        "w_iou": sum(pc["iou"] * gtc[c] for c, pc in enumerate(per_class)) / total,
        "m_bfs": sum(pc["bf_score"] for pc in per_class) / n_cls,
        "per_class": per_class,
    }


# ------------------------------------------------------------ PR / AUC


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float


def pr_curve_auc(scores, labels) -> PrCurve:
    """Precision/recall at every distinct score threshold (descending) and trapezoidal area.

    Tied scores form one threshold.  The curve is anchored at recall 0 with
    the first point's precision before integrating.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise MetricError("PR curve needs at least one positive and one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    # integrate over integer tp steps and divide by n_pos once, so a perfect curve is exactly 1
    steps = np.diff(np.r_[0, tp])
    p = np.r_[precision[0], precision]
    auc = float(np.sum(steps * (p[1:] + p[:-1]) / 2) / n_pos)
    return PrCurve(s[ends], precision, recall, auc)


def write_pr_csv(path, curve: PrCurve) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
    return path


# ------------------------------------------------------------ intervals


def wilson_interval(successes: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    if n <= 0:
        raise MetricError("Wilson interval needs n >= 1")
    if not 0 <= successes <= n:
        raise MetricError(f"successes {successes} outside [0, {n}]")
    p = successes / n
    z2 = z * z
    den = 1 + z2 / n
    centre = (p + z2 / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / den
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    # at p = 0 or 1 the bound on that side is exactly 0 or 1; rounding would miss it
    return (0.0 if successes == 0 else lo), (1.0 if successes == n else hi)


def bootstrap_auc_ci(scores, labels, n_resamples: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for PR-AUC; single-class resamples are redrawn."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.size == 0:
        raise MetricError("bootstrap needs data")
    pr_curve_auc(s, y)  # validates the full set
    rng = np.random.default_rng(seed)
    aucs = np.empty(n_resamples)
    i = 0
    while i < n_resamples:
        idx = rng.integers(0, s.size, s.size)
        yy = y[idx]
        if yy.min() == yy.max():
            continue
        aucs[i] = pr_curve_auc(s[idx], yy).auc
        i += 1
    alpha = (1 - level) / 2
    lo, hi = np.percentile(aucs, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def confidence_interval(kind: str, data, **kwargs) -> tuple[float, float]:
    """95% interval: ``kind='proportion'`` takes (successes, n); ``kind='auc'`` takes (scores, labels)."""
    if kind == "proportion":
        return wilson_interval(*data, **kwargs)
    if kind == "auc":
        return bootstrap_auc_ci(*data, **kwargs)
    raise MetricError(f"unknown interval kind {kind!r}")


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    task: str
    metrics: dict
    intervals: dict = field(default_factory=dict)
    pr: PrCurve | None = None
    run_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"task": self.task, "metrics": self.metrics, "intervals": self.intervals, "run_config": self.run_config}
        if self.pr is not None:
            d["pr_auc"] = self.pr.auc
        return d

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def write_csv(self, path) -> Path:
        """Flat ``metric,value`` rows for every scalar in the report."""
        path = Path(path)
        rows = []
        _flatten("", self.metrics, rows)
        _flatten("ci", self.intervals, rows)
        if self.pr is not None:
            rows.append(("pr_auc", self.pr.auc))
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in rows:
                w.writerow([k, repr(float(v))])
        return path


def _flatten(prefix, obj, rows) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, rows)
    elif isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float)) for v in obj):
            for i, v in enumerate(obj):
                rows.append((f"{prefix}.{i}", v))
        else:
            for i, v in enumerate(obj):
                _flatten(f"{prefix}.{i}", v, rows)
    elif isinstance(obj, (bool, np.bool_)):
        return
    elif isinstance(obj, (int, float, np.integer, np.floating)):
        rows.append((prefix, obj))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if is_dataclass_instance(obj):
        return _jsonable(asdict(obj))
    return obj


def is_dataclass_instance(obj) -> bool:
    return hasattr(obj, "__dataclass_fields__") and not isinstance(obj, type)


def classification_report(pred, truth, scores=None, run_config=None, bootstrap_seed: int = 0) -> MetricsReport:
    """Full sample-level report; ``scores`` (p(infected)) enables PR/AUC and its interval."""
    counts = confusion(pred, truth, positive_class=1)
    m = classification_metrics(counts)
    m["counts"] = asdict(counts)
    intervals = {
        "accuracy": list(wilson_interval(counts.tp + counts.tn, counts.total)),
    }
    if counts.tp + counts.fn:
        intervals["recall"] = list(wilson_interval(counts.tp, counts.tp + counts.fn))
    if counts.tn + counts.fp:
        intervals["specificity"] = list(wilson_interval(counts.tn, counts.tn + counts.fp))
    if counts.tp + counts.fp:
        intervals["precision"] = list(wilson_interval(counts.tp, counts.tp + counts.fp))
    pr = None
    truth = np.asarray(truth)
    if scores is not None and 0 < truth.sum() < truth.size:
        pr = pr_curve_auc(scores, truth)
        intervals["pr_auc"] = list(bootstrap_auc_ci(scores, truth, seed=bootstrap_seed))
    return MetricsReport("classification", m, intervals, pr, run_config or {})


def segmentation_report(pred_masks, gt_masks, tolerance_px=None, run_config=None) -> MetricsReport:
    results = [evaluate_image(p, g, tolerance_px) for p, g in zip(pred_masks, gt_masks)]
    agg = aggregate_segmentation(results)
    total = sum(r.pixels for r in results)
    correct = sum(k.intersection for r in results for k in r.counts)
    intervals = {"g_acc": list(wilson_interval(correct, total))}
    dices = [iou_dice_accuracy(r.counts[1])[1] for r in results]
    agg["infected_dice_mean"] = float(np.mean(dices))
    agg["infected_dice_std"] = float(np.std(dices))
    return MetricsReport("segmentation", agg, intervals, None, run_config or {})
