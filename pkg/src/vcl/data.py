"""Dataset ingestion, SMOTE balancing, augmentation, splitting, synthetic data."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import pnm
from .rng import stream

IMAGE_SUFFIXES = (".pgm", ".ppm")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images (N, H, W, C) in [0, 1] with integer labels into ``class_names``."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = list(self.class_names)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside the class-name table")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.class_names)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) <= 0:
            raise ValueError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_factor: float = 0.01  # fraction of a full turn
    zoom_factor: float = 0.05
    target_hw: tuple = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.flip_prob < 0 or self.rotation_factor < 0 or self.zoom_factor < 0:
            raise ValueError("augmentation factors must be non-negative")
        if len(self.target_hw) != 2 or min(self.target_hw) < 1:
            raise ValueError(f"target size must be two positive ints, got {self.target_hw}")


# -- loading / saving ---------------------------------------------------------
def list_dataset_files(root_dir):
    """``(class_names, [(label, path), ...])`` in the order ``load_dataset`` uses."""
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {os.fspath(root)} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {os.fspath(root)} has no class directories")
    entries = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory {os.fspath(cdir)} holds no PGM/PPM images")
        entries.extend((label, path) for path in files)
    return [p.name for p in class_dirs], entries


def load_dataset(root_dir, target_hw: Optional[Sequence[int]] = None) -> LabeledDataset:
    """Read ``root/<class_name>/*.pgm|*.ppm``; class order is sorted by name.

    Images of differing sizes are only accepted when ``target_hw`` is given,
    in which case each one is resized on load.
    """
    class_names, entries = list_dataset_files(root_dir)
    images, labels = [], []
    for label, path in entries:
        img = pnm.read(path)
        if images and img.shape[2] != images[0].shape[2]:
            raise DatasetError(
                f"{os.fspath(path)}: {img.shape[2]} channel(s), expected {images[0].shape[2]}"
            )
        if target_hw is not None:
            img = resize_bilinear(img[None], target_hw)[0]
        elif images and img.shape != images[0].shape:
            raise DatasetError(
                f"{os.fspath(path)}: size {img.shape[:2]} differs from {images[0].shape[:2]}; pass a target size"
            )
        images.append(img)
        labels.append(label)
    return LabeledDataset(np.stack(images), np.array(labels), class_names)


def save_dataset(ds: LabeledDataset, root_dir) -> list:
    """Write ``ds`` in the class-per-directory layout; returns written paths."""
    root = Path(root_dir)
    suffix = ".pgm" if ds.images.shape[3] == 1 else ".ppm"
    written = []
    counters = [0] * ds.num_classes
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for img, label in zip(ds.images, ds.labels):
        path = root / ds.class_names[label] / f"{counters[label]:05d}{suffix}"
        counters[label] += 1
        pnm.write(path, img)
        written.append(path)
    return written


# -- resizing -------------------------------------------------------------------
def _sample_grid(src: int, dst: int):
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(images: np.ndarray, target) -> np.ndarray:
    """Corner-aligned bilinear resize of (N, h, w, C) to (N, H, W, C)."""
    images = np.asarray(images)
    out_h, out_w = int(target[0]), int(target[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {tuple(target)}")
    n, h, w, c = images.shape
    if h < 1 or w < 1:
        raise ValueError(f"source size must be positive, got {(h, w)}")
    if (h, w) == (out_h, out_w):
        return images.copy()
    y0, y1, wy = _sample_grid(h, out_h)
    x0, x1, wx = _sample_grid(w, out_w)
    src = images.astype(np.float64)
    wy = wy[None, :, None, None]
    wx = wx[None, None, :, None]
    top = src[:, y0][:, :, x0] * (1 - wx) + src[:, y0][:, :, x1] * wx
    bottom = src[:, y1][:, :, x0] * (1 - wx) + src[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(images.dtype)


def resize_dataset(ds: LabeledDataset, target) -> LabeledDataset:
    return LabeledDataset(resize_bilinear(ds.images, target), ds.labels.copy(), ds.class_names)


# -- SMOTE ------------------------------------------------------------------------
def smote_target(counts) -> int:
    """Round-half-up of the mean class count."""
    return int(math.floor(float(np.mean(counts)) + 0.5))


def smote_balance(ds: LabeledDataset, k: int = 5, seed: int = 0) -> LabeledDataset:
    """Oversample every class below the mean count up to that count.

    Synthetic points lie on segments from a class member to one of its
    ``min(k, count - 1)`` nearest same-class neighbours (Euclidean distance
    over flattened pixels). Originals are kept verbatim and come first.
    """
    if len(ds) == 0:
        raise DatasetError("cannot balance an empty dataset")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = ds.class_counts()
    target = smote_target(counts)
    short = [c for c in range(ds.num_classes) if counts[c] < target]
    for c in short:
        if counts[c] < 2:
            raise DatasetError(
                f"class {ds.class_names[c]!r} has {counts[c]} sample(s); SMOTE needs at least 2 to interpolate"
            )
    if not short:
        return LabeledDataset(ds.images.copy(), ds.labels.copy(), ds.class_names)

    rng = stream(seed, "smote")
    shape = ds.images.shape[1:]
    new_images, new_labels = [ds.images], [ds.labels]
    for c in short:
        members = ds.images[ds.labels == c].reshape(counts[c], -1).astype(np.float64)
        sq = (members * members).sum(axis=1)
        dist = sq[:, None] + sq[None, :] - 2.0 * members @ members.T
        np.fill_diagonal(dist, np.inf)
        kk = min(k, counts[c] - 1)
        neighbours = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        n_new = target - counts[c]
        base = rng.integers(counts[c], size=n_new)
        pick = neighbours[base, rng.integers(kk, size=n_new)]
        lam = rng.random(n_new)[:, None]
        synth = members[base] + lam * (members[pick] - members[base])
        new_images.append(synth.reshape((n_new,) + shape).astype(np.float32))
        new_labels.append(np.full(n_new, c, dtype=np.int64))
    return LabeledDataset(np.concatenate(new_images), np.concatenate(new_labels), ds.class_names)


# -- augmentation -----------------------------------------------------------------
def _warp(img: np.ndarray, angle: float, scale_h: float, scale_w: float) -> np.ndarray:
    """Rotate by ``angle`` and zoom about the centre; zero outside the source."""
    h, w, _ = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos, sin = math.cos(angle), math.sin(angle)
    # inverse map: undo rotation, then undo zoom
    sy = (cos * yy - sin * xx) / scale_h + cy
    sx = (sin * yy + cos * xx) / scale_w + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0)[:, :, None]
    fx = (sx - x0)[:, :, None]
    src = img.astype(np.float64)
    out = np.zeros(src.shape)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * ok[:, :, None]
            out += wy * wx * vals
    return out.astype(img.dtype)


def augment(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip, rotation and zoom, drawn independently per image.

    ``rng`` only supplies one seed per image, so each image's transform does
    not depend on how many draws its neighbours consumed.
    """
    batch = np.asarray(batch, dtype=np.float32)
    seeds = rng.integers(0, 2**63, size=len(batch))
    turn = cfg.rotation_factor * 2.0 * math.pi
    out = np.empty_like(batch)
    for i, (img, s) in enumerate(zip(batch, seeds)):
        g = np.random.default_rng(int(s))
        flip = g.random() < cfg.flip_prob
        angle = g.uniform(-turn, turn) if turn > 0 else 0.0
        zh = g.uniform(1 - cfg.zoom_factor, 1 + cfg.zoom_factor) if cfg.zoom_factor > 0 else 1.0
        zw = g.uniform(1 - cfg.zoom_factor, 1 + cfg.zoom_factor) if cfg.zoom_factor > 0 else 1.0
        if flip:
            img = img[:, ::-1]
        if angle != 0.0 or zh != 1.0 or zw != 1.0:
            img = np.clip(_warp(img, angle, zh, zw), 0.0, 1.0)
        out[i] = img
    return out


# -- splitting --------------------------------------------------------------------
def split_indices(labels: np.ndarray, num_classes: int, spec: SplitSpec, class_names=None):
    """Per-class shuffled allocation; floors go to val/test, the rest to train."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    small = [c for c in range(num_classes) if counts[c] < 3]
    if small:
        names = [class_names[c] if class_names else str(c) for c in small]
        raise DatasetError(f"classes with fewer than 3 samples cannot be split: {', '.join(names)}")
    rng = stream(spec.seed, "split")
    train, val, test = [], [], []
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n = len(idx)
        n_val = int(math.floor(n * spec.val_frac + 1e-9))
        n_test = int(math.floor(n * spec.test_frac + 1e-9))
        val.append(idx[:n_val])
        test.append(idx[n_val : n_val + n_test])
        train.append(idx[n_val + n_test :])
    return tuple(np.sort(np.concatenate(part)) for part in (train, val, test))


def stratified_split(ds: LabeledDataset, spec: SplitSpec):
    parts = split_indices(ds.labels, ds.num_classes, spec, ds.class_names)
    return tuple(ds.subset(p) for p in parts)


# -- synthetic data -----------------------------------------------------------------
def synth_dataset(num_classes: int, per_class: int, hw=(32, 32), seed: int = 0, channels: int = 1) -> LabeledDataset:
    """Noise images with one oriented bright bar; class c's bar sits at c*pi/K.

    The bar is shifted a little off-centre per image, so members of a class
    differ, but orientation alone separates the classes.
    """
    if num_classes < 1 or per_class < 1 or min(hw) < 1 or channels < 1:
        raise ValueError("num_classes, per_class, hw and channels must be positive")
    h, w = int(hw[0]), int(hw[1])
    rng = stream(seed, "synth")
    yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2.0, np.arange(w) - (w - 1) / 2.0, indexing="ij")
    half_width = max(1.0, 0.06 * min(h, w))
    images = np.empty((num_classes * per_class, h, w, channels), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, c in enumerate(labels):
        theta = c * math.pi / num_classes
        # distance from a line through the (shifted) centre with direction theta
        offset = rng.uniform(-0.1, 0.1) * min(h, w)
        dist = np.abs(-math.sin(theta) * xx + math.cos(theta) * yy - offset)
        bar = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
        noise = rng.uniform(0.0, 0.25, size=(h, w, channels))
        images[i] = np.clip(noise + 0.7 * bar[:, :, None], 0.0, 1.0)
    return LabeledDataset(images, labels, [f"class_{c:02d}" for c in range(num_classes)])
