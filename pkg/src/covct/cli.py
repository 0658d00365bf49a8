"""Command-line entry point: ``covct <subcommand> [options]``.

Settings resolve as command-line flags > ``--config`` JSON file > built-in
defaults.  Every subcommand writes the resolved settings to
``run_config.json`` in its output directory, and the same dict is embedded in
checkpoints and reports.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical failure.  Failures print one ``error: <kind>: <message>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, dataio, metrics, trainer
from .errors import BuilderError, CovctError, DataError, NumericalError, ParameterError
from .gradcheck import TOLERANCE, run_suite
from .nets import (
    CtNetConfig,
    SegConfig,
    extract_features,
    load_checkpoint,
    save_checkpoint,
    two_stage_predict,
    write_pca_csv,
)
from .wavelet import enhance_image

log = logging.getLogger("covct")

TRAIN_KEYS = tuple(f.name for f in fields(trainer.TrainConfig))

DEFAULTS: dict = {
    "seed": 0,
    "manifest": None,
    "ckpt": None,
    "seg_ckpt": None,
    "image": None,
    "out": ".",
    "attention": False,
    "size": None,
    "precision": "f32",
    # TrainConfig fields
    "learning_rate": 0.001,
    "epochs": 30,
    "batch_size": 8,
    "momentum": 0.95,
    "stop_at_train_metric": None,
    # model overrides
    "widths": None,
    # splitting / cross-validation / evaluation
    "k": 5,
    "task": "cls",
    "split": "all",
    "threshold": 0.5,
    "tolerance_px": None,
    # phantom generation
    "count": 20,
    "infected_fraction": 0.5,
    # lesion ranges as [lo, hi]; None keeps the generator defaults
    "foreground_fraction": None,
    "blob_sigma": None,
    # enhancement
    "levels": 2,
}

DEFAULT_SIZE = {"cls": (82, 82), "seg": (304, 304), "synth": (64, 64)}


class UsageError(CovctError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ config


def parse_size(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        h, w = text
    else:
        try:
            h, w = (int(v) for v in str(text).lower().split("x"))
        except ValueError:
            raise UsageError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"size must be positive, got {h}x{w}")
    return int(h), int(w)


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg[key] = value
    cfg["command"] = args.command
    if cfg["size"] is not None:
        cfg["size"] = list(parse_size(cfg["size"]))
    if cfg["precision"] not in ("f32", "f64"):
        raise UsageError(f"precision must be f32 or f64, got {cfg['precision']!r}")
    return cfg


def _size(cfg: dict, kind: str) -> tuple[int, int]:
    return tuple(cfg["size"]) if cfg["size"] else DEFAULT_SIZE[kind]


def _train_config(cfg: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError(f"{cfg['command']} needs --{missing[0].replace('_', '-')}")


def _records(cfg: dict, need: str | None = None) -> list[dataio.SampleRecord]:
    records = dataio.parse_manifest(cfg["manifest"])
    if need == "label":
        records = [r for r in records if r.label is not None]
    elif need == "mask":
        records = [r for r in records if r.mask is not None]
    if cfg["split"] != "all":
        plan = trainer.make_splits(records, cfg["seed"], k=cfg["k"])
        records = [records[i] for i in getattr(plan, cfg["split"])]
    if not records:
        raise DataError(f"{cfg['manifest']}: no usable records")
    return records


# ------------------------------------------------------------- subcommands


def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    ranges = {k: tuple(cfg[k]) for k in ("foreground_fraction", "blob_sigma") if cfg[k] is not None}
    pc = dataio.PhantomConfig(size=_size(cfg, "synth"), infected_fraction=cfg["infected_fraction"],
                              seed=cfg["seed"], **ranges)
    records = dataio.generate_phantoms(pc, cfg["count"], out)
    _write_json(out / "run_config.json", cfg)
    print(f"wrote {len(records)} phantoms and {out / 'manifest.csv'}")
    return 0


def cmd_enhance(cfg: dict) -> int:
    if not cfg["image"] and not cfg["manifest"]:
        raise UsageError("enhance needs --image or --manifest")
    out = _out_dir(cfg)
    if cfg["image"]:
        paths = [Path(cfg["image"])]
    else:
        paths = [r.image_path for r in dataio.parse_manifest(cfg["manifest"])]
    for p in paths:
        img, _ = dataio.load_sample(dataio.SampleRecord(str(p), label="healthy"), grayscale=True)
        enhanced = enhance_image(img, levels=cfg["levels"])
        dataio.write_png(out / f"{p.stem}_enhanced.png", enhanced)
    _write_json(out / "run_config.json", cfg)
    print(f"enhanced {len(paths)} image(s) into {out}")
    return 0


def _split_datasets(cfg: dict, task: str):
    need = "label" if task == "classification" else "mask"
    records = _records({**cfg, "split": "all"}, need)
    size = _size(cfg, "cls" if task == "classification" else "seg")
    x, y, m = dataio.load_arrays(records, size, enhance=task == "classification", want_masks=task == "segmentation")
    data = trainer.ArrayDataset(x, y if task == "classification" else m, [r.image for r in records])
    plan = trainer.make_splits(records, cfg["seed"], k=cfg["k"])
    return data, plan, size


def _model_config(cfg: dict, task: str, size):
    extra = {"widths": tuple(cfg["widths"])} if cfg["widths"] else {}
    if task == "classification":
        return CtNetConfig(input_hw=tuple(size), **extra)
    return SegConfig(input_hw=tuple(size), **extra)


def _train(cfg: dict, task: str) -> int:
    _require(cfg, "manifest")
    out = _out_dir(cfg)
    data, plan, size = _split_datasets(cfg, task)
    tc = _train_config(cfg)
    mc = _model_config(cfg, task, size)
    fit = trainer.train_classifier if task == "classification" else trainer.train_segmenter
    res = fit(data.subset(plan.train), data.subset(plan.val), tc, mc)
    name = "classifier.ckpt" if task == "classification" else "segmenter.ckpt"
    ckpt = Path(cfg["ckpt"]) if cfg["ckpt"] else out / name
    save_checkpoint(res.model, ckpt, meta={"run_config": cfg, "best_epoch": res.best_epoch})
    res.history.write_csv(out / "history.csv")
    _write_json(out / "split.json", plan.to_dict())
    _write_json(out / "run_config.json", cfg)
    print(f"best epoch {res.best_epoch}; checkpoint {ckpt}")
    return 0


def cmd_train_cls(cfg: dict) -> int:
    return _train(cfg, "classification")


def cmd_train_seg(cfg: dict) -> int:
    return _train(cfg, "segmentation")


def cmd_cv(cfg: dict) -> int:
    _require(cfg, "manifest")
    task = {"cls": "classification", "seg": "segmentation"}.get(cfg["task"])
    if task is None:
        raise UsageError(f"--task must be cls or seg, got {cfg['task']!r}")
    out = _out_dir(cfg)
    data, plan, size = _split_datasets(cfg, task)
    result = trainer.run_cross_validation(data, plan, _train_config(cfg), task, _model_config(cfg, task, size))
    _write_json(out / "cv_report.json", {**result.to_dict(), "run_config": cfg})
    _write_json(out / "run_config.json", cfg)
    print(f"{result.summary['folds_ok']} of {plan.k} folds completed; report {out / 'cv_report.json'}")
    return 0 if result.summary["folds_ok"] else 3


def _write_report(out: Path, report: metrics.MetricsReport) -> None:
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    if report.pr is not None:
        metrics.write_pr_csv(out / "pr.csv", report.pr)


def cmd_eval_cls(cfg: dict) -> int:
    _require(cfg, "manifest", "ckpt")
    out = _out_dir(cfg)
    model = load_checkpoint(cfg["ckpt"], precision=cfg["precision"])
    _, h, w = model.input_shape
    records = _records(cfg, "label")
    x, y, _ = dataio.load_arrays(records, (h, w), enhance=True)
    probs = trainer.predict_batches(model, x.astype(model.dtype))
    pred = (probs[:, 1] >= cfg["threshold"]).astype(np.int64)
    report = metrics.classification_report(pred, y, scores=probs[:, 1], run_config=cfg,
                                           bootstrap_seed=trainer.derive_seed(cfg["seed"], 5))
    _write_report(out, report)
    _write_json(out / "run_config.json", cfg)
    print(f"accuracy {report.metrics['accuracy']:.4f} on {len(y)} images; report {out / 'metrics.json'}")
    return 0


def cmd_eval_seg(cfg: dict) -> int:
    _require(cfg, "manifest", "ckpt")
    out = _out_dir(cfg)
    model = load_checkpoint(cfg["ckpt"], precision=cfg["precision"])
    _, h, w = model.input_shape
    records = _records(cfg, "mask")
    x, _, masks = dataio.load_arrays(records, (h, w), want_masks=True)
    probs = trainer.predict_batches(model, x.astype(model.dtype))
    pred = probs.argmax(axis=1).astype(np.uint8)
    report = metrics.segmentation_report(pred, masks.astype(np.uint8), cfg["tolerance_px"], run_config=cfg)
    if masks.any() and not masks.all():
        # pixel-level precision/recall of the infected-class probability
        report.pr = metrics.pr_curve_auc(probs[:, 1].ravel(), masks.ravel())
    _write_report(out, report)
    _write_json(out / "run_config.json", cfg)
    print(f"mean IoU {report.metrics['m_iou']:.4f} on {len(records)} images; report {out / 'metrics.json'}")
    return 0


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "ckpt", "image")
    out = _out_dir(cfg)
    cls = load_checkpoint(cfg["ckpt"], precision=cfg["precision"])
    seg = load_checkpoint(cfg["seg_ckpt"], precision=cfg["precision"]) if cfg["seg_ckpt"] else None
    image = dataio.read_image(cfg["image"])
    if seg is None:
        # without a segmenter only a healthy verdict can be completed
        result = two_stage_predict(cls, None, image, threshold=1.1)
        p_inf = result.p_infected
        if p_inf >= cfg["threshold"]:
            raise UsageError("image classified infected; predict needs --seg-ckpt to produce its mask")
    else:
        result = two_stage_predict(cls, seg, image, threshold=cfg["threshold"])
    stem = Path(cfg["image"]).stem
    mask_path = out / f"{stem}_mask.png"
    dataio.write_png(mask_path, result.mask.astype(np.float64))
    _write_json(out / f"{stem}_prediction.json", {
        "image": cfg["image"], "label": result.label, "p_infected": result.p_infected,
        "mask": mask_path.name, "infected_pixels": int(result.mask.sum()), "run_config": cfg,
    })
    print(f"{result.label} (p_infected={result.p_infected:.4f}); mask {mask_path}")
    return 0


def cmd_features(cfg: dict) -> int:
    _require(cfg, "manifest", "ckpt")
    out = _out_dir(cfg)
    model = load_checkpoint(cfg["ckpt"], precision=cfg["precision"])
    _, h, w = model.input_shape
    records = _records(cfg, "label")
    x, y, _ = dataio.load_arrays(records, (h, w), enhance=True)
    _, pca = extract_features(model, x.astype(model.dtype))
    write_pca_csv(out / "features.csv", [r.image for r in records], [r.label for r in records], pca.projection)
    _write_json(out / "run_config.json", {**cfg, "explained_variance_ratio": pca.explained_variance_ratio.tolist()})
    print(f"wrote {out / 'features.csv'}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    results = run_suite(seed=cfg["seed"])
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.kind:<24} max_rel_error={r.max_rel_error:.3e} checked={r.n_checked:<5} {status}")
    failed = [r.kind for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check above {TOLERANCE:g} for: {', '.join(failed)}")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic CT phantoms with masks and a manifest"),
    "enhance": (cmd_enhance, "wavelet-enhance one image or every image of a manifest"),
    "train-cls": (cmd_train_cls, "train the residual classifier"),
    "train-seg": (cmd_train_seg, "train the dual-pooling segmenter"),
    "cv": (cmd_cv, "k-fold cross-validation"),
    "eval-cls": (cmd_eval_cls, "classification metrics report and PR curve"),
    "eval-seg": (cmd_eval_seg, "segmentation metrics report and PR curve"),
    "predict": (cmd_predict, "two-stage prediction for one image, writes the mask PNG"),
    "features": (cmd_features, "penultimate-layer features projected to 2-D by PCA"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="covct", description="Wavelet-enhanced CT classification and segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"covct {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON settings file (flags take precedence)")
        p.add_argument("--seed", type=int)
        p.add_argument("--manifest", metavar="PATH", help="CSV with header image,label,mask")
        p.add_argument("--ckpt", metavar="PATH", help="checkpoint to read (or write, for training)")
        p.add_argument("--seg-ckpt", dest="seg_ckpt", metavar="PATH", help="segmenter checkpoint for predict")
        p.add_argument("--image", metavar="PATH")
        p.add_argument("--out", metavar="PATH", help="output directory")
        p.add_argument("--attention", action="store_true", help="inverse-frequency pixel weights in the loss")
        p.add_argument("--size", metavar="HxW")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--count", type=int, help="number of phantoms (synth)")
        p.add_argument("--levels", type=int, help="wavelet levels (enhance)")
        p.add_argument("--k", type=int, help="number of folds")
        p.add_argument("--task", choices=("cls", "seg"), help="task for cv")
        p.add_argument("--split", choices=("all", "train", "val", "test"), help="records to evaluate")
        p.add_argument("--threshold", type=float, help="decision threshold on p(infected)")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        if not argv:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given")
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg)
    except (UsageError, ParameterError, BuilderError) as exc:
        code = 1
        err = exc
    except (DataError, CovctError, OSError) as exc:
        code = 3 if isinstance(exc, NumericalError) else 2
        err = exc
    kind = getattr(err, "kind", "io")
    message = " ".join(str(err).split())
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
