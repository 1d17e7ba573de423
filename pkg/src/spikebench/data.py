"""Gesture image datasets: loading, splitting, augmentation and sparsification.

Images are kept as ``float32`` arrays of shape ``(N, 28, 28)`` with intensities
in ``[0, 1]``; labels are ``int64`` class indices.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConsistencyError, FormatError, LabelRangeError, ParseError

IMAGE_SIDE = 28
NUM_PIXELS = IMAGE_SIDE * IMAGE_SIDE
SPLITS = ("train", "validation", "test")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (IMAGE_SIDE, IMAGE_SIDE):
            raise ValueError(f"expected a 28x28 image, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0, 1]")
        if int(self.label) < 0:
            raise ValueError("label must be non-negative")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
            raise ValueError(f"images must have shape (N, 28, 28), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.size:
            raise LabelRangeError(
                f"label {self.labels[bad[0]]} at index {bad[0]} outside [0, {self.num_classes})"
            )

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def histogram(self) -> np.ndarray:
        """Samples per class, length ``num_classes``."""
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, split=None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def map_images(self, fn) -> "Dataset":
        """New dataset with ``fn`` applied to every :class:`ImageSample`."""
        out = np.empty_like(self.images)
        for i in range(len(self)):
            out[i] = fn(self[i]).pixels
        return Dataset(out, self.labels.copy(), self.num_classes, self.split)

    def sparsity(self) -> float:
        """Fraction of exactly-zero pixels."""
        return float(np.mean(self.images == 0.0))


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 10.0
    max_shift_frac: float = 0.10
    max_zoom_frac: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_rotation_deg <= 45.0:
            raise ValueError("max_rotation_deg must be in [0, 45]")
        for name in ("max_shift_frac", "max_zoom_frac"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")


# ---------------------------------------------------------------------------
# Loaders


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _check_rows(rows: np.ndarray, num_classes: int, first_row: int = 0):
    if rows.shape[1] != NUM_PIXELS + 1:
        raise ParseError(
            f"expected {NUM_PIXELS + 1} columns, got {rows.shape[1]}", row=first_row
        )
    pix = rows[:, 1:]
    bad = np.flatnonzero(((pix < 0) | (pix > 255)).any(axis=1))
    if bad.size:
        raise ParseError("pixel value outside [0, 255]", row=first_row + int(bad[0]))
    labels = rows[:, 0]
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        r = first_row + int(bad[0])
        raise LabelRangeError(f"row {r}: label {labels[bad[0]]} not in [0, {num_classes})")


def load_csv(path, num_classes: int, split: str = "train") -> Dataset:
    """Load a ``label,pixel0..pixel783`` CSV (sign-mnist layout).

    Leading ``#`` lines (provenance) are skipped and a non-numeric first line
    is treated as a header. Row indices in errors count data rows from 0,
    header excluded.
    """
    with _open_maybe_gzip(path) as fh:
        text = io.TextIOWrapper(fh, encoding="utf-8").read()
    lines = text.splitlines()
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    start = 0
    if lines and not lines[0].split(",", 1)[0].strip().lstrip("-").isdigit():
        start = 1
    body = [ln for ln in lines[start:] if ln.strip()]
    if not body:
        raise ParseError("no data rows")

    rows = np.empty((len(body), NUM_PIXELS + 1), dtype=np.int64)
    for r, record in enumerate(csv.reader(body)):
        if len(record) != NUM_PIXELS + 1:
            raise ParseError(f"expected {NUM_PIXELS + 1} columns, got {len(record)}", row=r)
        try:
            rows[r] = [int(v) for v in record]
        except ValueError as exc:
            raise ParseError(f"non-integer field ({exc})", row=r) from None
    _check_rows(rows, num_classes)

    images = (rows[:, 1:].astype(np.float32) / np.float32(255.0)).reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
    return Dataset(images, rows[:, 0], num_classes, split)


def write_csv(dataset: Dataset, path, header: bool = True, comments=()):
    """Inverse of :func:`load_csv`; pixels are rounded back to bytes."""
    pix = np.rint(dataset.images.reshape(len(dataset), -1) * 255.0).astype(np.int64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        if header:
            w.writerow(["label"] + [f"pixel{i}" for i in range(NUM_PIXELS)])
        for label, row in zip(dataset.labels, pix):
            w.writerow([int(label), *row.tolist()])


def _read_idx(path, expected_magic):
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    count = math.prod(dims)
    if len(raw) - hdr != count:
        raise FormatError(f"{path}: expected {count} payload bytes, found {len(raw) - hdr}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Load an MNIST-style IDX image/label pair (optionally gzip-compressed).

    ``num_classes`` defaults to ``max(label) + 1``.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"image file holds {images.shape[0]} items, label file {labels.shape[0]}"
        )
    if images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise FormatError(f"expected 28x28 images, got {images.shape[1:]}")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.astype(np.float32) / np.float32(255.0), labels, num_classes, split)


def write_idx(dataset: Dataset, images_path, labels_path, compress: bool | None = None):
    """Write a dataset as an IDX pair; gzip when the path ends in ``.gz``."""
    pix = np.rint(dataset.images * 255.0).astype(np.uint8)
    img_blob = struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), IMAGE_SIDE, IMAGE_SIDE) + pix.tobytes()
    lab_blob = struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)) + dataset.labels.astype(np.uint8).tobytes()
    for path, blob in ((images_path, img_blob), (labels_path, lab_blob)):
        gz = str(path).endswith(".gz") if compress is None else compress
        opener = gzip.open if gz else open
        with opener(path, "wb") as fh:
            fh.write(blob)


def load_any(path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Load a CSV file, or an IDX pair given as ``images_path,labels_path``.

    A path whose name contains ``images-idx3`` is paired with the matching
    ``labels-idx1`` file next to it.
    """
    path = str(path)
    if "," in path:
        img, lab = path.split(",", 1)
        return load_idx(img, lab, num_classes, split)
    name = os.path.basename(path)
    if "images-idx3" in name:
        lab = os.path.join(os.path.dirname(path), name.replace("images-idx3", "labels-idx1"))
        return load_idx(path, lab, num_classes, split)
    if num_classes is None:
        raise ValueError("num_classes is required for CSV input")
    return load_csv(path, num_classes, split)


# ---------------------------------------------------------------------------
# Splitting


def split(dataset: Dataset, val_fraction: float, seed: int, names=("train", "validation")):
    """Seeded disjoint split; the second part holds ``round(val_fraction * N)`` samples.

    Both parts keep the original relative sample order.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"val_fraction={val_fraction} on {n} samples leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx, names[0]), dataset.subset(val_idx, names[1])


def random_subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Seeded random subset of ``size`` samples, original order kept."""
    if not 0 < size <= len(dataset):
        raise ValueError(f"subset size {size} outside (0, {len(dataset)}]")
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size, replace=False))
    return dataset.subset(idx)


# ---------------------------------------------------------------------------
# Augmentation

_CENTER = (IMAGE_SIDE - 1) / 2.0


def _homog(m2, t):
    h = np.eye(3)
    h[:2, :2] = m2
    h[:2, 2] = t
    return h


def augment_matrix(angle_deg: float, shift_rc, zoom: float) -> np.ndarray:
    """Homogeneous map from output (row, col) to input (row, col).

    The forward transform rotates about the image centre, then shifts by
    ``shift_rc`` pixels, then zooms about the centre by ``zoom``.
    """
    c = np.array([_CENTER, _CENTER])
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    rotate = _homog(rot, c - rot @ c)
    shift = _homog(np.eye(2), np.asarray(shift_rc, dtype=float))
    scale = _homog(np.eye(2) * zoom, c - zoom * c)
    forward = scale @ shift @ rotate
    return np.linalg.inv(forward)


def draw_augment_params(cfg: AugmentConfig, rng: np.random.Generator):
    """Draw (angle_deg, (shift_r, shift_c), zoom) in that order."""
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    max_px = cfg.max_shift_frac * IMAGE_SIDE
    shift = (rng.uniform(-max_px, max_px), rng.uniform(-max_px, max_px))
    zoom = 1.0 + rng.uniform(-cfg.max_zoom_frac, cfg.max_zoom_frac)
    return angle, shift, zoom


def apply_affine(pixels: np.ndarray, inv: np.ndarray) -> np.ndarray:
    out = ndimage.affine_transform(
        np.asarray(pixels, dtype=np.float64),
        inv[:2, :2],
        offset=inv[:2, 2],
        order=1,
        mode="constant",
        cval=0.0,
        prefilter=False,
    )
    return np.clip(out, 0.0, 1.0)


def augment(sample: ImageSample, cfg: AugmentConfig, draw: np.random.Generator) -> ImageSample:
    """Random rotation, shift and zoom with bilinear resampling and zero fill."""
    angle, shift, zoom = draw_augment_params(cfg, draw)
    out = apply_affine(sample.pixels, augment_matrix(angle, shift, zoom))
    return ImageSample(out.astype(np.float32), sample.label)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, draw: np.random.Generator) -> np.ndarray:
    out = np.empty_like(images)
    for i, img in enumerate(images):
        angle, shift, zoom = draw_augment_params(cfg, draw)
        out[i] = apply_affine(img, augment_matrix(angle, shift, zoom))
    return out


# ---------------------------------------------------------------------------
# Edge detection

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def sobel_magnitude(pixels: np.ndarray) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float64)
    gx = ndimage.correlate(img, SOBEL_X, mode="constant", cval=0.0)
    gy = ndimage.correlate(img, SOBEL_Y, mode="constant", cval=0.0)
    return np.hypot(gx, gy)


def edge_detect(sample: ImageSample, threshold: float) -> ImageSample:
    """Binary Sobel edge map: magnitude / max(magnitude) >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    mag = sobel_magnitude(sample.pixels)
    peak = mag.max()
    if peak <= 0.0:
        return ImageSample(np.zeros((IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32), sample.label)
    edges = (mag / peak >= threshold).astype(np.float32)
    return ImageSample(edges, sample.label)


def edge_detect_dataset(dataset: Dataset, threshold: float) -> Dataset:
    return dataset.map_images(lambda s: edge_detect(s, threshold))


# ---------------------------------------------------------------------------
# Raw RGB preprocessing (ASL-digits style 100x100 colour images)


def read_raw_rgb(path) -> np.ndarray:
    """Read ``u32 width, u32 height`` (little-endian) then R, G, B planes.

    Returns a ``(3, height, width)`` uint8 array.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: missing raw RGB header")
    width, height = struct.unpack("<II", raw[:8])
    expected = 3 * width * height
    if len(raw) - 8 != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).reshape(3, height, width)


def write_raw_rgb(path, planes: np.ndarray):
    planes = np.asarray(planes, dtype=np.uint8)
    _, h, w = planes.shape
    Path(path).write_bytes(struct.pack("<II", w, h) + planes.tobytes())


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of fractional pixel overlaps."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            w[o, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return w / w.sum(axis=1, keepdims=True)


def area_resize(plane: np.ndarray, out_h: int = IMAGE_SIDE, out_w: int = IMAGE_SIDE) -> np.ndarray:
    h, w = plane.shape
    return _area_weights(h, out_h) @ np.asarray(plane, dtype=np.float64) @ _area_weights(w, out_w).T


def rgb_to_gray28(planes: np.ndarray) -> np.ndarray:
    """Area-average to 28x28 then BT.601 luminance; result in [0, 1]."""
    gray = sum(wt * area_resize(p) for wt, p in zip(LUMA_WEIGHTS, planes))
    return np.clip(gray / 255.0, 0.0, 1.0)


def prepare_rgb_directory(root, num_classes: int | None = None) -> Dataset:
    """Build a dataset from ``root/<label>/*.rgb`` raw dumps.

    Pixels are quantised to bytes so the result round-trips through CSV.
    """
    root = Path(root)
    label_dirs = sorted((d for d in root.iterdir() if d.is_dir() and d.name.isdigit()), key=lambda d: int(d.name))
    images, labels = [], []
    for d in label_dirs:
        for f in sorted(d.glob("*.rgb")):
            g = rgb_to_gray28(read_raw_rgb(f))
            images.append(np.rint(g * 255.0) / 255.0)
            labels.append(int(d.name))
    if not images:
        raise FormatError(f"{root}: no <label>/*.rgb files found")
    if num_classes is None:
        num_classes = max(labels) + 1
    return Dataset(np.stack(images), np.array(labels), num_classes)
