"""Orthonormal 2-D Haar filter bank and the two-level enhancement fusion.

Analysis runs along the width axis first, then along the height axis, with
low filter ``[1, 1]/sqrt(2)`` and high filter ``[1, -1]/sqrt(2)``.  Subband
naming: ``lh`` is low along width / high along height, ``hl`` is high along
width / low along height.

All functions operate on the last two axes, so a stack of images (or an
NCHW batch) can be transformed in one call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

log = logging.getLogger(__name__)

@dataclass
class SubbandSet:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    level: int = 1

    def __post_init__(self):
        shapes = {self.ll.shape, self.lh.shape, self.hl.shape, self.hh.shape}
        if len(shapes) != 1:
            raise ShapeError(f"subbands must share one shape, got {sorted(shapes)}")
        if self.level < 1:
            raise ParameterError("subband level must be >= 1")

    def zeros_like(self) -> "SubbandSet":
        z = np.zeros_like(self.ll)
        return SubbandSet(z, z.copy(), z.copy(), z.copy(), self.level)


def pad_to_multiple(x: np.ndarray, multiple: int) -> np.ndarray:
    """Edge-replicate the bottom/right borders up to a multiple of ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="edge")


def dwt2_haar(x: np.ndarray, level: int = 1) -> SubbandSet:
    """One level of the 2-D Haar analysis bank.

    Odd extents are padded by edge replication first.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.size == 0:
        raise ShapeError(f"dwt2_haar needs a non-empty image, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    x = pad_to_multiple(x, 2)
    # the two 1/sqrt(2) factors are folded into one exact 1/2 at the end
    half = x.dtype.type(0.5)
    even_w, odd_w = x[..., 0::2], x[..., 1::2]
    low_w = even_w + odd_w
    high_w = even_w - odd_w
    ll = (low_w[..., 0::2, :] + low_w[..., 1::2, :]) * half
    lh = (low_w[..., 0::2, :] - low_w[..., 1::2, :]) * half
    hl = (high_w[..., 0::2, :] + high_w[..., 1::2, :]) * half
    hh = (high_w[..., 0::2, :] - high_w[..., 1::2, :]) * half
    return SubbandSet(ll, lh, hl, hh, level)


def idwt2_haar(s: SubbandSet) -> np.ndarray:
    """Exact synthesis inverse of :func:`dwt2_haar`."""
    half = s.ll.dtype.type(0.5)
    # undo the height pass
    low_w = _interleave_rows(s.ll + s.lh, s.ll - s.lh)
    high_w = _interleave_rows(s.hl + s.hh, s.hl - s.hh)
    # undo the width pass
    return _interleave_cols((low_w + high_w) * half, (low_w - high_w) * half)


def _interleave_rows(even: np.ndarray, odd: np.ndarray) -> np.ndarray:
    out = np.empty(even.shape[:-2] + (2 * even.shape[-2], even.shape[-1]), dtype=even.dtype)
    out[..., 0::2, :] = even
    out[..., 1::2, :] = odd
    return out


def _interleave_cols(even: np.ndarray, odd: np.ndarray) -> np.ndarray:
    out = np.empty(even.shape[:-1] + (2 * even.shape[-1],), dtype=even.dtype)
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return out


def _keep_path(x: np.ndarray, band: str, levels: int) -> np.ndarray:
    """Decompose ``levels`` times along one subband, zero every sibling, synthesize back."""
    if levels == 0:
        return x
    bands = dwt2_haar(x)
    child = _keep_path(getattr(bands, band), band, levels - 1)
    kept = bands.zeros_like()
    setattr(kept, band, child)
    return idwt2_haar(kept)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luminance for (H, W, 3|4) input; 2-D input passes through."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[-1] in (3, 4):
        rgb = img[..., :3].astype(np.float64)
        return rgb @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    raise ShapeError(f"cannot convert image of shape {img.shape} to grayscale")


def minmax_rescale(x: np.ndarray) -> np.ndarray:
    """Map to [0, 1]; a flat input maps to all zeros."""
    lo, hi = x.min(), x.max()
    if not hi > lo:
        return np.zeros_like(x)
    out = (x - lo) / (hi - lo)
    return np.clip(out, 0, 1)


def enhance_image(x: np.ndarray, levels: int = 2) -> np.ndarray:
    """Wavelet enhancement: fuse the pure-LL and pure-HH reconstructions.

    Image A keeps only the LL child of the LL chain after ``levels``
    decompositions, image B keeps only the HH child of the HH chain; every
    other subband is zeroed before synthesis.  The enhanced image is
    ``minmax(A + B)``.  RGB input is converted to grayscale first.
    """
    if not 1 <= levels <= 3:
        raise ParameterError(f"levels must be 1, 2 or 3, got {levels}")
    img = to_grayscale(np.asarray(x))
    if img.size == 0:
        raise ShapeError("enhance_image: empty image")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float64)
    h, w = img.shape[-2:]
    multiple = 2**levels
    if h % multiple or w % multiple:
        log.warning("image %dx%d not divisible by %d; padding by edge replication", h, w, multiple)
        img = pad_to_multiple(img, multiple)
    fused = _keep_path(img, "ll", levels) + _keep_path(img, "hh", levels)
    return minmax_rescale(fused[..., :h, :w])
