from .builders import (
    CtNetConfig,
    SegConfig,
    build_cov_ctnet,
    build_cov_raseg,
    build_model,
    build_segnet_baseline,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .features import extract_features, pca_2d, write_pca_csv
from .graph import LayerSpec, ModelGraph, forward, infer_shapes, run_graph
from .pipeline import Prediction, two_stage_predict

__all__ = [
    "CtNetConfig",
    "LayerSpec",
    "ModelGraph",
    "Prediction",
    "SegConfig",
    "build_cov_ctnet",
    "build_cov_raseg",
    "build_model",
    "build_segnet_baseline",
    "extract_features",
    "forward",
    "infer_shapes",
    "load_checkpoint",
    "pca_2d",
    "run_graph",
    "save_checkpoint",
    "two_stage_predict",
    "write_pca_csv",
]
