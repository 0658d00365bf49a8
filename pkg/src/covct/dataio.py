"""Image/mask ingestion, manifests and the synthetic CT phantom generator."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ManifestError, ParameterError
from .wavelet import enhance_image, minmax_rescale, to_grayscale

log = logging.getLogger(__name__)

LABELS = ("healthy", "infected")
MANIFEST_HEADER = ["image", "label", "mask"]
# PIL modes accepted as 8/16-bit grayscale or RGB(A)
_MODE_MAX = {"L": 255, "LA": 255, "RGB": 255, "RGBA": 255, "I;16": 65535, "I;16B": 65535, "I;16L": 65535}


@dataclass
class SampleRecord:
    image: str
    label: str | None = None
    mask: str | None = None
    split: str | None = None
    root: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        if self.label is None and self.mask is None:
            raise ManifestError(f"{self.image}: a record needs a label, a mask, or both")
        if self.label is not None and self.label not in LABELS:
            raise ManifestError(f"{self.image}: unknown label {self.label!r}; expected one of {LABELS}")

    @property
    def image_path(self) -> Path:
        return self.root / self.image

    @property
    def mask_path(self) -> Path | None:
        return None if self.mask is None else self.root / self.mask

    @property
    def class_index(self) -> int | None:
        return None if self.label is None else LABELS.index(self.label)


# ------------------------------------------------------------------ images


def read_image(path) -> np.ndarray:
    """Read a PNG/PGM as float64, values scaled to [0, 1] by the format's full range.

    Returns (H, W) for grayscale and (H, W, 3) for colour input.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "I" and im.format in ("PNG", "PPM"):
                arr = np.asarray(im, dtype=np.float64)
                full = 65535.0
            elif mode in _MODE_MAX:
                arr = np.asarray(im, dtype=np.float64)
                full = float(_MODE_MAX[mode])
            else:
                raise DataError(f"{path}: unsupported pixel format {mode!r} (need 8/16-bit gray or RGB)")
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if arr.ndim == 3:
        arr = arr[..., :3] if arr.shape[-1] >= 3 else arr[..., 0]
    return arr / full


def write_png(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image (or a {0, 1} mask) as 8-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def resize_bilinear(img: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of the first two axes with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    oh, ow = (int(v) for v in size)
    if (oh, ow) == (h, w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    extra = (None,) * (img.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_nearest(img: np.ndarray, size) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[:2]
    oh, ow = (int(v) for v in size)
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return img[rows][:, cols]


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    if mask.ndim == 3:
        mask = mask.max(axis=-1)
    return (mask >= 0.5).astype(np.uint8)


def load_sample(rec: SampleRecord, size=None, grayscale: bool = True, enhance: bool = False):
    """Load one record as ``(image, mask)``.

    The image is optionally converted to grayscale (luminance), optionally
    wavelet-enhanced at full resolution, resized bilinearly to ``size`` and
    min-max normalized to [0, 1] (float32).  The mask, if any, is binarized,
    resized by nearest neighbour and returned as uint8 in {0, 1}.
    """
    img = read_image(rec.image_path)
    orig_hw = img.shape[:2]
    if grayscale or enhance:
        img = to_grayscale(img)
    if enhance:
        img = enhance_image(img)
    if size is not None:
        img = resize_bilinear(img, size)
    img = minmax_rescale(img).astype(np.float32)

    mask = None
    if rec.mask_path is not None:
        raw = read_image(rec.mask_path)
        if raw.shape[:2] != orig_hw:
            raise DataError(f"{rec.mask_path}: mask size {raw.shape[:2]} differs from image size {orig_hw}")
        mask = binarize_mask(raw)
        if size is not None:
            mask = resize_nearest(mask, size)
        if mask.shape != img.shape[:2]:
            raise DataError(f"{rec.mask_path}: mask/image size mismatch after resize")
    return img, mask


def load_arrays(records, size, enhance: bool = False, want_masks: bool = False):
    """Stack records into (N, 1, H, W) images plus label and mask arrays."""
    images, labels, masks = [], [], []
    for rec in records:
        img, mask = load_sample(rec, size, grayscale=True, enhance=enhance)
        images.append(img[None])
        labels.append(-1 if rec.class_index is None else rec.class_index)
        if want_masks:
            if mask is None:
                raise DataError(f"{rec.image}: record has no mask")
            masks.append(mask)
    x = np.stack(images) if images else np.zeros((0, 1) + tuple(size), np.float32)
    y = np.asarray(labels, dtype=np.int64)
    m = np.stack(masks).astype(np.int64) if masks else None
    return x, y, m


# --------------------------------------------------------------- manifests


def parse_manifest(path) -> list[SampleRecord]:
    """Read a ``image,label,mask`` CSV; label and/or mask may be blank per row.

    Paths stay verbatim; they are resolved against the manifest's directory
    when loaded.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: first line must be the header 'image,label,mask', got {header}")
    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        image, label, mask = (c.strip() for c in row)
        if not image:
            raise ManifestError(f"{path}:{lineno}: empty image path")
        if image in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image {image!r} (first seen on line {seen[image]})")
        seen[image] = lineno
        try:
            records.append(SampleRecord(image, label or None, mask or None, root=path.parent))
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return records


def write_manifest(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.image, r.label or "", r.mask or ""])
    return path


# ---------------------------------------------------------------- phantoms


@dataclass
class PhantomConfig:
    size: tuple[int, int] = (64, 64)
    blob_count: tuple[int, int] = (1, 3)
    blob_intensity: tuple[float, float] = (0.45, 0.7)
    # lesion sigma as a fraction of min(H, W)
    blob_sigma: tuple[float, float] = (0.05, 0.12)
    foreground_fraction: tuple[float, float] = (0.01, 0.25)
    noise_sigma: float = 0.02
    infected_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("foreground_fraction", "blob_sigma"):
            if len(getattr(self, name)) != 2:
                raise ParameterError(f"{name} must be a [lo, hi] pair, got {getattr(self, name)}")
        if not 0.0 < self.blob_sigma[0] <= self.blob_sigma[1]:
            raise ParameterError(f"invalid blob_sigma range {self.blob_sigma}")
        lo, hi = self.foreground_fraction
        if not 0.0 < lo <= hi < 0.5:
            raise ParameterError(f"foreground_fraction range {self.foreground_fraction} must lie inside (0, 0.5)")
        if not 1 <= self.blob_count[0] <= self.blob_count[1]:
            raise ParameterError(f"invalid blob_count range {self.blob_count}")
        if not 0.0 <= self.infected_fraction <= 1.0:
            raise ParameterError("infected_fraction must lie in [0, 1]")


@dataclass
class Lesion:
    cy: float
    cx: float
    sy: float
    sx: float
    amplitude: float

    def field(self, yy, xx) -> np.ndarray:
        return self.amplitude * np.exp(-0.5 * (((yy - self.cy) / self.sy) ** 2 + ((xx - self.cx) / self.sx) ** 2))


def _lung_field(h: int, w: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Body ellipse with two darker lung ellipses; returns (image, lung mask)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    body = ((yy - cy) / (0.46 * h)) ** 2 + ((xx - cx) / (0.48 * w)) ** 2 <= 1.0
    img = np.where(body, 0.5 + 0.05 * (yy / h), 0.0)
    lungs = np.zeros((h, w), dtype=bool)
    for side in (-1, 1):
        ly = cy + rng.uniform(-0.03, 0.03) * h
        lx = cx + side * rng.uniform(0.2, 0.24) * w
        ry, rx = rng.uniform(0.32, 0.38) * h, rng.uniform(0.15, 0.19) * w
        r2 = ((yy - ly) / ry) ** 2 + ((xx - lx) / rx) ** 2
        inside = r2 <= 1.0
        # smooth radial gradient: darker at the core
        img = np.where(inside, 0.1 + 0.1 * r2, img)
        lungs |= inside
    return img, lungs


def _place_lesions(cfg: PhantomConfig, lungs: np.ndarray, rng) -> tuple[list[Lesion], np.ndarray]:
    h, w = lungs.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = np.nonzero(lungs)
    base = min(h, w)
    lo, hi = cfg.foreground_fraction
    for _ in range(1000):
        k = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
        lesions = []
        for _ in range(k):
            j = int(rng.integers(len(ys)))
            lesions.append(
                Lesion(
                    float(ys[j]),
                    float(xs[j]),
                    rng.uniform(*cfg.blob_sigma) * base,
                    rng.uniform(*cfg.blob_sigma) * base,
                    rng.uniform(*cfg.blob_intensity),
                )
            )
        total = sum(les.field(yy, xx) for les in lesions)
        mask = total > 0.5 * total.max()
        frac = mask.mean()
        if lo <= frac <= hi:
            return lesions, total
    raise DataError(f"could not place lesions with foreground fraction in {cfg.foreground_fraction}")


def render_phantom(cfg: PhantomConfig, infected: bool, seed_seq) -> tuple[np.ndarray, np.ndarray, list[Lesion]]:
    rng = np.random.default_rng(seed_seq)
    h, w = cfg.size
    img, lungs = _lung_field(h, w, rng)
    mask = np.zeros((h, w), dtype=np.uint8)
    lesions: list[Lesion] = []
    if infected:
        lesions, total = _place_lesions(cfg, lungs, rng)
        img = img + total
        mask = (total > 0.5 * total.max()).astype(np.uint8)
    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), mask, lesions


def generate_phantoms(cfg: PhantomConfig, n: int, out_dir) -> list[SampleRecord]:
    """Write ``n`` phantom image/mask pairs plus ``manifest.csv`` under ``out_dir``.

    Healthy samples get an all-zero mask.  Sample ``i`` is rendered from its
    own seed stream, so outputs are byte-identical for equal (cfg, n).
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    n_inf = int(round(n * cfg.infected_fraction))
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC7])).permutation(n)
    infected = np.zeros(n, dtype=bool)
    infected[order[:n_inf]] = True

    records = []
    for i in range(n):
        img, mask, _ = render_phantom(cfg, bool(infected[i]), np.random.SeedSequence([cfg.seed, i]))
        label = LABELS[int(infected[i])]
        name = f"phantom_{i:04d}_{label}.png"
        try:
            write_png(out / "images" / name, img)
            write_png(out / "masks" / name, mask)
        except OSError as exc:
            raise DataError(f"cannot write phantom files under {out}: {exc}") from None
        records.append(SampleRecord(f"images/{name}", label, f"masks/{name}", root=out))
    write_manifest(records, out / "manifest.csv")
    return records
