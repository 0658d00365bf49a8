"""Two-stage inference: screen with the classifier, segment only infected images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataio import resize_bilinear, resize_nearest
from ..wavelet import enhance_image, minmax_rescale, to_grayscale
from .graph import ModelGraph, forward

INFECTED = 1
DECISION_THRESHOLD = 0.5


@dataclass
class Prediction:
    label: str
    p_infected: float
    mask: np.ndarray  # uint8 {0,1} at the input image's resolution


def classifier_input(gray: np.ndarray, model: ModelGraph) -> np.ndarray:
    _, h, w = model.input_shape
    enhanced = enhance_image(gray)
    return minmax_rescale(resize_bilinear(enhanced, (h, w))).astype(np.float32)[None, None]


def segmenter_input(gray: np.ndarray, model: ModelGraph) -> np.ndarray:
    _, h, w = model.input_shape
    return minmax_rescale(resize_bilinear(minmax_rescale(gray), (h, w))).astype(np.float32)[None, None]


def two_stage_predict(cls: ModelGraph, seg: ModelGraph | None, image: np.ndarray,
                      threshold: float = DECISION_THRESHOLD) -> Prediction:
    """Classify ``image``; when p(infected) >= threshold, return the segmenter's argmax mask.

    ``image`` is a raw (H, W) or (H, W, 3) array.  A healthy verdict returns an
    all-zero mask and never touches ``seg``.
    """
    gray = to_grayscale(np.asarray(image, dtype=np.float64))
    probs = forward(cls, classifier_input(gray, cls), mode="eval").data
    p_inf = float(probs[0, INFECTED])
    if p_inf < threshold:
        return Prediction("healthy", p_inf, np.zeros(gray.shape, dtype=np.uint8))
    seg_probs = forward(seg, segmenter_input(gray, seg), mode="eval").data
    mask = seg_probs[0].argmax(axis=0).astype(np.uint8)
    return Prediction("infected", p_inf, resize_nearest(mask, gray.shape))
