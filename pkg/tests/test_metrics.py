import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from covct.errors import MetricError, ShapeError
from covct.metrics import (
    ClassRegionCounts,
    ConfusionCounts,
    aggregate_segmentation,
    bf_score,
    bootstrap_auc_ci,
    classification_metrics,
    classification_report,
    confidence_interval,
    confusion,
    default_bf_tolerance,
    dice_score,
    evaluate_image,
    iou_dice_accuracy,
    pr_curve_auc,
    region_counts,
    region_metrics,
    segmentation_report,
    wilson_interval,
    write_pr_csv,
)


def random_mask_pair(rng):
    h, w = rng.integers(1, 65, size=2)
    kind = rng.integers(0, 3)
    if kind == 0:  # independent noise
        a = rng.random((h, w)) < rng.random()
        b = rng.random((h, w)) < rng.random()
    else:  # blobs with a perturbed copy
        yy, xx = np.mgrid[:h, :w]
        cy, cx, r = rng.random() * h, rng.random() * w, rng.random() * max(h, w) / 2
        a = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        b = a ^ (rng.random((h, w)) < 0.05) if kind == 1 else np.roll(a, rng.integers(-3, 4), axis=1)
    return a.astype(np.uint8), b.astype(np.uint8)


# --------------------------------------------------------- classification


def test_confusion_trivial_cases():
    t = np.array([0, 1, 1, 0, 1])
    c = confusion(t, t)
    assert c.fp == c.fn == 0
    c = confusion(1 - t, t)
    assert c.tp == c.tn == 0
    with pytest.raises(ShapeError):
        confusion([0, 1], [0])


def test_perfect_classifier():
    m = classification_metrics(ConfusionCounts(tp=50, tn=50))
    assert all(m[k] == 1.0 for k in ("accuracy", "precision", "recall", "specificity", "f_score", "mcc"))
    assert m["degenerate"] == []


def test_mcc_example():
    m = classification_metrics(ConfusionCounts(tp=50, tn=40, fp=10, fn=5))
    assert m["mcc"] == pytest.approx(0.7156, abs=5e-5)
    assert m["mcc"] == pytest.approx((50 * 40 - 50) / math.sqrt(60 * 55 * 50 * 45), rel=1e-15)


def test_single_class_predictions_are_flagged():
    m = classification_metrics(confusion([1] * 6, [1, 0, 1, 0, 1, 1]))
    assert m["mcc"] == 0.0 and "mcc" in m["degenerate"]
    assert m["specificity"] == 0.0
    with pytest.raises(MetricError):
        classification_metrics(ConfusionCounts())


def test_classification_matches_tally_oracle_exactly():
    rng = np.random.default_rng(10)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        pred, truth = rng.integers(0, 2, n), rng.integers(0, 2, n)
        tp, tn, fp, fn = oracles.tally(pred.tolist(), truth.tolist())
        c = confusion(pred, truth)
        assert (c.tp, c.tn, c.fp, c.fn) == (tp, tn, fp, fn)
        got = classification_metrics(c)
        for k, v in oracles.classification(tp, tn, fp, fn).items():
            assert got[k] == v, k


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=80))
def test_classification_symmetries(pairs):
    pred = np.array([p for p, _ in pairs])
    truth = np.array([t for _, t in pairs])
    m = classification_metrics(confusion(pred, truth))
    swapped = classification_metrics(confusion(truth, pred))
    assert m["mcc"] == pytest.approx(swapped["mcc"], abs=1e-15)
    neg = classification_metrics(confusion(pred, truth, positive_class=0))
    assert m["recall"] == neg["specificity"]
    for k in ("accuracy", "precision", "recall", "specificity", "f_score"):
        assert 0.0 <= m[k] <= 1.0
    assert -1.0 <= m["mcc"] <= 1.0


# ---------------------------------------------------------------- regions


def test_region_examples():
    gt = np.zeros((10, 20), np.uint8)
    gt[:, :10] = 1
    pred = np.zeros_like(gt)
    pred[:5, :10] = 1  # covers half of gt, no false positives
    r = region_metrics(pred, gt)[1]
    assert r["iou"] == 0.5 and r["dice"] == pytest.approx(2 / 3)
    assert region_metrics(gt, gt)[1]["iou"] == 1.0
    assert region_metrics(1 - gt, gt)[1]["dice"] == 0.0


def test_empty_masks_overlap_is_one_and_accuracy_flagged():
    z = np.zeros((4, 4), np.uint8)
    r = region_metrics(z, z)[1]
    assert r["iou"] == r["dice"] == 1.0 and r["degenerate"]


def test_region_rejects_bad_masks():
    with pytest.raises(ShapeError):
        region_metrics(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(MetricError):
        region_metrics(np.full((2, 2), 2), np.zeros((2, 2)))


def test_region_and_bf_match_oracles_exactly():
    rng = np.random.default_rng(11)
    for _ in range(50):
        pred, gt = random_mask_pair(rng)
        tol = int(rng.integers(1, 4))
        counts = region_counts(pred, gt)
        bf = bf_score(pred, gt, tol)
        for cls in (0, 1):
            k = counts[cls]
            assert (k.intersection, k.pred, k.gt) == oracles.region(pred, gt, cls)
            iou, dice, acc = iou_dice_accuracy(k)
            assert (iou, dice, acc) == oracles.iou_dice_acc(*oracles.region(pred, gt, cls))
            # Dice = 2 IoU / (1 + IoU) holds exactly over the rationals
            if k.union:
                fi = Fraction(k.intersection, k.union)
                assert Fraction(2 * k.intersection, k.pred + k.gt) == 2 * fi / (1 + fi)
            assert dice == pytest.approx(2 * iou / (1 + iou), rel=1e-15, abs=1e-300)
            assert dice >= iou
            assert bf[cls] == oracles.bf(pred, gt, cls, tol)


def test_dice_score_shortcut():
    rng = np.random.default_rng(12)
    pred, gt = random_mask_pair(rng)
    assert dice_score(pred, gt) == region_metrics(pred, gt)[1]["dice"]


# --------------------------------------------------------------- boundary


def test_bf_examples():
    gt = np.zeros((32, 32), np.uint8)
    gt[8:20, 8:20] = 1
    assert bf_score(gt, gt)[1] == 1.0
    shifted = np.roll(gt, 1, axis=1)
    assert bf_score(shifted, gt, 2)[1] == 1.0
    far = np.zeros_like(gt)
    far[28:31, 28:31] = 1
    small = np.zeros_like(gt)
    small[1:4, 1:4] = 1
    assert bf_score(far, small, 2)[1] == 0.0


def test_bf_one_empty_boundary_scores_zero():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:5, 2:5] = 1
    assert bf_score(np.zeros_like(gt), gt, 1)[1] == 0.0
    assert bf_score(np.zeros_like(gt), np.zeros_like(gt), 1)[1] == 1.0


def test_default_tolerance():
    assert default_bf_tolerance((10, 10)) == 1
    assert default_bf_tolerance((304, 304)) == math.ceil(0.0075 * math.hypot(304, 304)) == 4


# ------------------------------------------------------------- aggregates


def aggregate_oracle(pairs, tol):
    """Pooled pixel tallies, then per-class ratios, then class means."""
    total = sum(g.size for _, g in pairs)
    correct = sum(int(p[r, q] == g[r, q]) for p, g in pairs for r in range(g.shape[0]) for q in range(g.shape[1]))
    per = []
    for cls in (0, 1):
        inter = sum(oracles.region(p, g, cls)[0] for p, g in pairs)
        npx = sum(oracles.region(p, g, cls)[1] for p, g in pairs)
        ngx = sum(oracles.region(p, g, cls)[2] for p, g in pairs)
        iou, _, acc = oracles.iou_dice_acc(inter, npx, ngx)
        bf = sum(oracles.bf(p, g, cls, tol) for p, g in pairs) / len(pairs)
        per.append((iou, acc, bf, ngx))
    return {
        "g_acc": correct / total,
        "m_acc": (per[0][1] + per[1][1]) / 2,
        "m_iou": (per[0][0] + per[1][0]) / 2,
        "w_iou": (per[0][0] * per[0][3] + per[1][0] * per[1][3]) / total,
        "m_bfs": (per[0][2] + per[1][2]) / 2,
    }


def test_aggregates_match_oracle():
    rng = np.random.default_rng(13)
    for _ in range(10):
        shape = tuple(rng.integers(4, 33, size=2))
        pairs = []
        for _ in range(int(rng.integers(1, 4))):
            p, g = random_mask_pair(rng)
            pairs.append((p[: shape[0], : shape[1]].copy(), g[: shape[0], : shape[1]].copy()))
        pairs = [(p, g) for p, g in pairs if p.shape == pairs[0][0].shape]
        got = aggregate_segmentation([evaluate_image(p, g, 2) for p, g in pairs])
        for k, v in aggregate_oracle(pairs, 2).items():
            assert got[k] == pytest.approx(v, rel=1e-15), k


def test_aggregate_weighted_mean_example():
    # IoUs {1, 0.5} at gt frequencies {0.9, 0.1}
    counts = [ClassRegionCounts(90, 90, 90), ClassRegionCounts(5, 5, 10)]
    from covct.metrics import ImageSegResult

    agg = aggregate_segmentation([ImageSegResult(counts, {0: 1.0, 1: 1.0}, 100)])
    assert agg["m_iou"] == pytest.approx(0.75)
    assert agg["w_iou"] == pytest.approx(0.95)


def test_aggregate_perfect_and_order_invariant():
    rng = np.random.default_rng(14)
    masks = [random_mask_pair(rng)[0][:16, :16] for _ in range(4)]
    masks = [m for m in masks if m.shape == masks[0].shape]
    perfect = aggregate_segmentation([evaluate_image(m, m) for m in masks])
    for k in ("g_acc", "m_iou", "w_iou", "m_bfs"):
        assert perfect[k] == pytest.approx(1.0)
    res = [evaluate_image(m, np.roll(m, 1, 0)) for m in masks]
    a = aggregate_segmentation(res)
    b = aggregate_segmentation(res[::-1])
    for k in ("g_acc", "m_acc", "m_iou", "w_iou"):
        assert a[k] == b[k]
    assert a["m_bfs"] == pytest.approx(b["m_bfs"], rel=1e-15)
    with pytest.raises(MetricError):
        aggregate_segmentation([])


# ----------------------------------------------------------------- PR/AUC


def test_pr_examples():
    assert pr_curve_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    c = pr_curve_auc([0.5] * 8, [1, 0, 0, 0, 1, 0, 0, 0])
    assert len(c.recall) == 1 and c.recall[0] == 1.0 and c.precision[0] == 0.25
    with pytest.raises(MetricError):
        pr_curve_auc([0.1, 0.2], [1, 1])


def test_pr_matches_sweep_oracle():
    rng = np.random.default_rng(15)
    for _ in range(50):
        s = np.round(rng.random(10), 1)  # rounding forces ties
        y = rng.integers(0, 2, 10)
        if y.min() == y.max():
            continue
        assert pr_curve_auc(s, y).auc == pytest.approx(oracles.pr_auc_sweep(s.tolist(), y.tolist()), rel=1e-14)


def test_auc_invariant_to_monotone_transform():
    rng = np.random.default_rng(16)
    s, y = rng.random(40), rng.integers(0, 2, 40)
    y[0], y[1] = 0, 1
    assert pr_curve_auc(s, y).auc == pr_curve_auc(np.exp(3 * s) - 7, y).auc


def test_pr_csv(tmp_path):
    c = pr_curve_auc([0.9, 0.4, 0.4, 0.1], [1, 0, 1, 0])
    lines = write_pr_csv(tmp_path / "pr.csv", c).read_text().splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert len(lines) == 4


# -------------------------------------------------------------- intervals


def test_wilson_examples():
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.404, abs=1e-3) and hi == pytest.approx(0.596, abs=1e-3)
    lo, hi = wilson_interval(10**6, 10**6)
    assert hi == 1.0 and lo > 0.99999
    with pytest.raises(MetricError):
        wilson_interval(0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_wilson_contains_estimate(sn):
    s, n = sn
    lo, hi = wilson_interval(s, n)
    assert 0.0 <= lo <= s / n <= hi <= 1.0


def test_bootstrap_examples():
    s = np.r_[np.linspace(0.6, 1, 10), np.linspace(0, 0.4, 10)]
    y = np.r_[np.ones(10), np.zeros(10)]
    assert bootstrap_auc_ci(s, y, seed=3) == (1.0, 1.0)
    assert bootstrap_auc_ci(s, y, seed=3) == confidence_interval("auc", (s, y), seed=3)
    assert confidence_interval("proportion", (50, 100)) == wilson_interval(50, 100)
    with pytest.raises(MetricError):
        confidence_interval("roc", (s, y))


def test_bootstrap_is_seeded():
    rng = np.random.default_rng(17)
    s, y = rng.random(30), np.r_[np.ones(15), np.zeros(15)]
    assert bootstrap_auc_ci(s, y, seed=5) == bootstrap_auc_ci(s, y, seed=5)
    lo, hi = bootstrap_auc_ci(s, y, seed=5)
    assert 0 <= lo <= pr_curve_auc(s, y).auc <= hi <= 1


# ---------------------------------------------------------------- reports


def test_classification_report_roundtrip(tmp_path):
    truth = np.array([1, 1, 1, 0, 0, 0, 1, 0])
    pred = np.array([1, 1, 0, 0, 0, 1, 1, 0])
    scores = np.array([0.9, 0.8, 0.4, 0.2, 0.1, 0.6, 0.7, 0.3])
    rep = classification_report(pred, truth, scores, {"seed": 1})
    data = json.loads(rep.write_json(tmp_path / "m.json").read_text())
    assert data["metrics"]["counts"] == {"tp": 3, "tn": 3, "fp": 1, "fn": 1}
    assert data["run_config"] == {"seed": 1}
    assert 0 < data["pr_auc"] <= 1
    rows = (tmp_path / "m.csv")
    rep.write_csv(rows)
    text = rows.read_text().splitlines()
    assert text[0] == "metric,value" and any(r.startswith("mcc,") for r in text)


def test_segmentation_report(tmp_path):
    gt = np.zeros((16, 16), np.uint8)
    gt[4:10, 4:10] = 1
    rep = segmentation_report([gt, gt], [gt, np.roll(gt, 1, 0)], tolerance_px=1)
    assert rep.metrics["g_acc"] > 0.9
    lo, hi = rep.intervals["g_acc"]
    assert lo <= rep.metrics["g_acc"] <= hi
    rep.write_json(tmp_path / "s.json")
