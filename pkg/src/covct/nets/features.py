"""Penultimate-layer feature export with a 2-D PCA projection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import BuilderError, ShapeError
from .graph import ModelGraph, run_graph


@dataclass
class PcaResult:
    projection: np.ndarray  # (n, 2)
    explained_variance_ratio: np.ndarray  # (2,)
    eigenvalues: np.ndarray  # all, descending
    components: np.ndarray  # (2, d)
    mean: np.ndarray


def extract_activations(model: ModelGraph, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    layer = model.metadata.get("feature_layer")
    if layer is None:
        raise BuilderError(f"{model.arch} declares no feature layer")
    chunks = []
    for start in range(0, len(x), batch_size):
        values = run_graph(model, x[start : start + batch_size], mode="eval")
        chunks.append(values[layer].data.reshape(len(x[start : start + batch_size]), -1))
    return np.concatenate(chunks).astype(np.float64)


def pca_2d(features: np.ndarray) -> PcaResult:
    """PCA by eigendecomposition of the sample covariance.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 3:
        raise ShapeError(f"PCA needs at least 3 samples, got feature matrix of shape {f.shape}")
    mean = f.mean(axis=0)
    centered = f - mean
    cov = centered.T @ centered / (f.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    k = min(2, vecs.shape[1])
    comps = vecs[:, :k].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    proj = centered @ comps.T
    total = vals.sum()
    ratio = vals[:k] / total if total > 0 else np.zeros(k)
    if k < 2:
        proj = np.column_stack([proj, np.zeros(len(proj))])
        ratio = np.append(ratio, 0.0)
        comps = np.vstack([comps, np.zeros_like(comps)])
    return PcaResult(proj, ratio, vals, comps, mean)


def extract_features(model: ModelGraph, x: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, PcaResult]:
    acts = extract_activations(model, x, batch_size)
    return acts, pca_2d(acts)


def write_pca_csv(path, ids, labels, projection: np.ndarray) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "pc1", "pc2"])
        for sid, lab, (p1, p2) in zip(ids, labels, projection):
            w.writerow([sid, lab, repr(float(p1)), repr(float(p2))])
    return path
