"""Splitting, cross-validation, static pixel attention and the two training loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .errors import CovctError, DataError, MetricError, NumericalError, ParameterError
from .nets.builders import CtNetConfig, SegConfig, build_cov_ctnet, build_model
from .nets.graph import ModelGraph, forward
from .ops import cross_entropy_loss
from .optim import SgdState, sgd_step
from .tensor import GradTape, backward

log = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for one component of a run."""
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


# ------------------------------------------------------------------ splits


@dataclass
class SplitPlan:
    train: list[int]
    val: list[int]
    test: list[int]
    folds: dict[int, int]  # sample id -> fold number (1..k) over train + val
    seed: int
    k: int = 5
    stratified: bool = True

    @property
    def pool(self) -> list[int]:
        return sorted(self.train + self.val)

    def fold_ids(self, fold: int) -> list[int]:
        return sorted(i for i, f in self.folds.items() if f == fold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds"] = {str(k): v for k, v in sorted(self.folds.items())}
        return d


def make_splits(labels, seed: int = 0, k: int = 5, test_ratio: float = 0.2, val_ratio: float = 0.2) -> SplitPlan:
    """Stratified test / validation / train split plus ``k`` folds over train + val.

    ``labels`` holds one stratum key per sample (``None`` allowed); manifest
    records are accepted directly and stratified by their class label.  Per
    stratum the test share is ``ceil(test_ratio * n)`` and the validation share
    ``ceil(val_ratio * remainder)``.
    """
    labels = [getattr(r, "label", r) for r in labels]
    n = len(labels)
    if n < 10:
        raise DataError(f"splitting needs at least 10 samples, got {n}")
    if k < 1:
        raise ParameterError("fold count must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, 17))

    strata: dict = {}
    for i, lab in enumerate(labels):
        strata.setdefault(lab, []).append(i)
    stratified = True
    if len(strata) > 1 and min(len(v) for v in strata.values()) < 5:
        log.warning("a class has fewer than 5 samples; falling back to an unstratified split")
        stratified = False
        strata = {None: list(range(n))}

    train, val, test = [], [], []
    folds: dict[int, int] = {}
    offset = 0
    for key in sorted(strata, key=lambda s: (s is None, str(s))):
        ids = np.asarray(strata[key])[rng.permutation(len(strata[key]))].tolist()
        n_test = math.ceil(test_ratio * len(ids))
        rest = ids[n_test:]
        n_val = math.ceil(val_ratio * len(rest))
        test += ids[:n_test]
        val += rest[:n_val]
        train += rest[n_val:]
        for j, sid in enumerate(rest):
            folds[sid] = (offset + j) % k + 1
        offset += len(rest)
    return SplitPlan(sorted(train), sorted(val), sorted(test), folds, seed, k, stratified)


# --------------------------------------------------------------- attention


def compute_attention_weights(masks) -> tuple[float, float]:
    """Inverse-frequency class weights ``w_c = 1 / (2 f_c)`` from training masks."""
    m = np.asarray(masks)
    total = m.size
    fg = int(np.count_nonzero(m == 1))
    bg = total - fg
    if fg == 0 or bg == 0:
        missing = "foreground" if fg == 0 else "background"
        raise DataError(f"training masks contain no {missing} pixels; cannot weight an absent class")
    return total / (2 * bg), total / (2 * fg)


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 8
    momentum: float = 0.95
    attention: bool = False
    seed: int = 0
    precision: str = "f32"
    # stop as soon as the training-set metric reaches this value
    stop_at_train_metric: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    train_metric: float = float("nan")


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> list[float]:
        return [getattr(e, name) for e in self.epochs]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_metric"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_metric)])
        return path


@dataclass
class ArrayDataset:
    """Preloaded samples: images (N, 1, H, W) and targets (labels (N,) or masks (N, H, W))."""

    x: np.ndarray
    y: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} images but {len(self.y)} targets")
        if not self.ids:
            self.ids = list(range(len(self.x)))

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "ArrayDataset":
        idx = list(idx)
        return ArrayDataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx])


@dataclass
class TrainResult:
    model: ModelGraph
    history: TrainHistory
    best_epoch: int


# -------------------------------------------------------------- evaluation


def predict_batches(model: ModelGraph, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = [forward(model, x[s : s + batch_size], mode="eval").data for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,))


def _loss_value(probs: np.ndarray, y: np.ndarray, weights) -> float:
    t = y.astype(np.int64)[:, None]
    p = np.maximum(np.take_along_axis(probs.astype(np.float64), t, axis=1), 1e-12)
    terms = -np.log(p)
    if weights is not None:
        terms = terms * np.asarray(weights, dtype=np.float64)[t]
    return float(terms.mean())


def evaluate(model: ModelGraph, data: ArrayDataset, task: str, weights=None, batch_size: int = 8) -> tuple[float, float]:
    """(mean loss, metric): accuracy for classification, pooled infected-class Dice for segmentation."""
    if len(data) == 0:
        return float("nan"), float("nan")
    probs = predict_batches(model, data.x, batch_size)
    loss = _loss_value(probs, data.y, weights)
    pred = probs.argmax(axis=1)
    if task == "classification":
        metric = float(np.mean(pred == data.y))
    else:
        metric = metrics.dice_score(pred.astype(np.uint8), data.y.astype(np.uint8), cls=1)
    return loss, metric


# ---------------------------------------------------------------- training


def _fit(model: ModelGraph, train: ArrayDataset, val: ArrayDataset | None, cfg: TrainConfig, task: str,
         weights=None) -> TrainResult:
    params = model.parameters()
    state = SgdState(cfg.learning_rate, cfg.momentum)
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    x = train.x.astype(model.dtype, copy=False)
    y = train.y
    n = len(train)
    if n == 0:
        raise DataError("training set is empty")
    has_val = val is not None and len(val) > 0
    history = TrainHistory()
    best_metric, best_epoch, best_snap = -math.inf, 0, model.snapshot()

    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            for p in params:
                p.grad = None
            try:
                with GradTape() as tape:
                    probs = forward(model, x[idx], mode="train", seed=derive_seed(cfg.seed, 3, epoch, b))
                    loss = cross_entropy_loss(probs, y[idx], weights)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from None
            value = loss.data.item()
            if not math.isfinite(value):
                raise NumericalError(f"epoch {epoch}, batch {b}: loss is {value}")
            backward(tape, loss)
            sgd_step(params, [p.grad for p in params], state)
            loss_sum += value * len(idx)

        train_loss = loss_sum / n
        need_train_metric = cfg.stop_at_train_metric is not None or not has_val
        train_metric = evaluate(model, train, task, weights)[1] if need_train_metric else float("nan")
        val_loss, val_metric = evaluate(model, val, task, weights) if has_val else (float("nan"), float("nan"))
        history.epochs.append(EpochRecord(epoch, train_loss, val_loss, val_metric, train_metric))
        log.info("epoch %d  train_loss %.5f  val_loss %.5f  val_metric %.4f  train_metric %.4f",
                 epoch, train_loss, val_loss, val_metric, train_metric)

        score = val_metric if has_val else train_metric
        if score > best_metric:
            best_metric, best_epoch, best_snap = score, epoch, model.snapshot()
        if cfg.stop_at_train_metric is not None and train_metric >= cfg.stop_at_train_metric:
            break

    if history.epochs:
        model.restore(best_snap)
    return TrainResult(model, history, best_epoch)


def train_classifier(train: ArrayDataset, val: ArrayDataset | None, cfg: TrainConfig,
                     model_cfg: CtNetConfig | None = None, model: ModelGraph | None = None) -> TrainResult:
    """SGD-momentum training of the residual classifier; keeps the best-validation-accuracy weights."""
    if model is None:
        model_cfg = model_cfg or CtNetConfig(input_hw=train.x.shape[2:])
        model = build_cov_ctnet(model_cfg, seed=derive_seed(cfg.seed, 1), precision=cfg.precision)
    labels = np.asarray(train.y)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) >= model.num_classes:
        raise DataError("classification training needs a class label for every sample")
    return _fit(model, train, val, cfg, "classification")


def train_segmenter(train: ArrayDataset, val: ArrayDataset | None, cfg: TrainConfig,
                    model_cfg: SegConfig | None = None, model: ModelGraph | None = None) -> TrainResult:
    """Per-pixel (optionally attention-weighted) cross-entropy training; keeps the best Dice weights."""
    for data in (train, val):
        if data is None:
            continue
        if data.y.ndim != 3 or data.y.shape[1:] != data.x.shape[2:]:
            raise DataError(f"mask shape {data.y.shape[1:]} does not match image shape {data.x.shape[2:]}")
    if model is None:
        model_cfg = model_cfg or SegConfig(input_hw=train.x.shape[2:])
        model = build_model(model_cfg.to_dict(), seed=derive_seed(cfg.seed, 1), precision=cfg.precision)
    weights = list(compute_attention_weights(train.y)) if cfg.attention else None
    return _fit(model, train, val, cfg, "segmentation", weights)


# -------------------------------------------------------- cross-validation


@dataclass
class CvResult:
    folds: list[dict]
    summary: dict

    def to_dict(self) -> dict:
        return {"folds": self.folds, "summary": self.summary}


def _fold_metrics(model: ModelGraph, data: ArrayDataset, task: str) -> metrics.MetricsReport:
    probs = predict_batches(model, data.x)
    pred = probs.argmax(axis=1)
    if task == "classification":
        return metrics.classification_report(pred, data.y, scores=probs[:, 1])
    return metrics.segmentation_report(pred.astype(np.uint8), data.y.astype(np.uint8))


def _scalars(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (bool, np.bool_)):
            continue
        if isinstance(v, (int, float, np.integer, np.floating)):
            out[prefix + k] = float(v)
    return out


def run_cross_validation(data: ArrayDataset, plan: SplitPlan, cfg: TrainConfig, task: str,
                         model_cfg=None) -> CvResult:
    """Train one model per fold, validate on the held-out fold, summarize mean/std.

    With ``plan.k == 1`` this is a single train/validation holdout.  A failing
    fold is recorded with its error and the remaining folds still run.
    """
    if task not in ("classification", "segmentation"):
        raise ParameterError(f"unknown task {task!r}")
    trainer = train_classifier if task == "classification" else train_segmenter
    fold_results = []
    for fold in range(1, plan.k + 1):
        if plan.k == 1:
            tr_ids, va_ids = plan.train, plan.val
        else:
            va_ids = plan.fold_ids(fold)
            held = set(va_ids)
            tr_ids = [i for i in plan.pool if i not in held]
        fold_cfg = TrainConfig(**{**asdict(cfg), "seed": derive_seed(cfg.seed, 100 + fold)})
        try:
            res = trainer(data.subset(tr_ids), data.subset(va_ids), fold_cfg, model_cfg)
            report = _fold_metrics(res.model, data.subset(va_ids), task)
            fold_results.append({"fold": fold, "status": "ok", "n_train": len(tr_ids), "n_val": len(va_ids),
                                 "best_epoch": res.best_epoch, "metrics": report.to_dict()["metrics"]})
        except (CovctError, MetricError) as exc:
            log.error("fold %d failed: %s", fold, exc)
            fold_results.append({"fold": fold, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})

    ok = [f for f in fold_results if f["status"] == "ok"]
    summary: dict = {"folds_ok": len(ok), "folds_failed": len(fold_results) - len(ok)}
    if ok:
        keys = set.intersection(*(set(_scalars(f["metrics"])) for f in ok))
        for key in sorted(keys):
            vals = np.array([_scalars(f["metrics"])[key] for f in ok])
            summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return CvResult(fold_results, summary)
