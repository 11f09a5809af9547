"""Datasets: a seeded synthetic shape renderer and a class-per-folder PNG loader.

Images are float32 NHWC arrays scaled to ``[-1, 1]``; labels are int64 class ids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "ring", "cross")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    image_size: int = 24
    channels: int = 3
    classes: tuple = ("circle", "square", "triangle")
    n_per_class: int = 200
    flip_prob: float = 0.5
    center_crop: bool = True
    path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ConfigError(f"dataset source must be 'synthetic' or 'folder', got {self.source!r}")
        if self.source == "folder" and not self.path:
            raise ConfigError("folder datasets need a path")
        if self.source == "synthetic":
            unknown = [c for c in self.classes if c not in SHAPES]
            if unknown:
                raise ConfigError(f"synthetic classes must come from {SHAPES}, got {unknown}")
            if self.n_per_class < 1:
                raise ConfigError("n_per_class must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    classes: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.labels)

    def split(self, holdout: float, rng: np.random.Generator):
        """Random (train, held-out) split."""
        order = rng.permutation(len(self))
        n_hold = int(round(holdout * len(self)))
        hold, train = order[:n_hold], order[n_hold:]
        return (LabeledImages(self.images[train], self.labels[train], self.classes),
                LabeledImages(self.images[hold], self.labels[hold], self.classes))


# ---------------------------------------------------------------------------
# synthetic shapes

_SUPERSAMPLE = 4


def _mask(kind: str, size: int, cx: float, cy: float, s: float, angle: float) -> np.ndarray:
    n = size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "circle":
        inside = dx ** 2 + dy ** 2 <= s ** 2
    elif kind == "square":
        inside = (np.abs(u) <= s * 0.85) & (np.abs(v) <= s * 0.85)
    elif kind == "triangle":
        # equilateral, circumradius s
        inside = (v >= -0.5 * s) & (np.sqrt(3) * u + v <= s) & (-np.sqrt(3) * u + v <= s)
    elif kind == "ring":
        r2 = dx ** 2 + dy ** 2
        inside = (r2 <= s ** 2) & (r2 >= (0.55 * s) ** 2)
    elif kind == "cross":
        arm = 0.3 * s
        inside = ((np.abs(u) <= arm) & (np.abs(v) <= s)) | ((np.abs(v) <= arm) & (np.abs(u) <= s))
    else:
        raise ConfigError(f"unknown shape {kind!r}")
    m = inside.astype(np.float64).reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE)
    return m.mean(axis=(1, 3))


def render_shape(kind: str, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """One anti-aliased shape on a two-tone gradient background, values in [-1, 1]."""
    s = rng.uniform(0.22, 0.38) * size
    cx, cy = rng.uniform(s, size - s, 2)
    angle = rng.uniform(0, 2 * np.pi)
    bg_a, bg_b = rng.uniform(-1.0, -0.3, (2, channels))
    fg = rng.uniform(0.0, 1.0, channels)
    ramp = np.linspace(0.0, 1.0, size)[None, :, None]
    background = np.broadcast_to(bg_a + (bg_b - bg_a) * ramp, (size, size, channels))
    m = _mask(kind, size, cx, cy, s, angle)[..., None]
    return (background * (1 - m) + fg * m).astype(np.float32)


def synth_generate(spec: DatasetSpec, rng: np.random.Generator) -> LabeledImages:
    """Render ``n_per_class`` images for every class, interleaved by class."""
    n_cls = len(spec.classes)
    images = np.empty((spec.n_per_class * n_cls, spec.image_size, spec.image_size, spec.channels), np.float32)
    labels = np.empty(spec.n_per_class * n_cls, np.int64)
    i = 0
    for _ in range(spec.n_per_class):
        for label, kind in enumerate(spec.classes):
            images[i] = render_shape(kind, spec.image_size, spec.channels, rng)
            labels[i] = label
            i += 1
    return LabeledImages(images, labels, tuple(spec.classes))


# ---------------------------------------------------------------------------
# folders


def _to_array(img: Image.Image, spec: DatasetSpec) -> np.ndarray:
    img = img.convert("L" if spec.channels == 1 else "RGB")
    w, h = img.size
    if spec.center_crop and w != h:
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        img = img.crop((left, top, left + side, top + side))
    if img.size != (spec.image_size, spec.image_size):
        img = img.resize((spec.image_size, spec.image_size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return np.clip(arr / 127.5 - 1.0, -1.0, 1.0)


def load_folder(path, spec: DatasetSpec) -> LabeledImages:
    """Load ``path/<class_name>/*.png``; classes are the sorted sub-directory names."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    classes = tuple(sorted(p.name for p in root.iterdir() if p.is_dir()))
    images, labels = [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name).glob("*.png")):
            try:
                with Image.open(f) as img:
                    images.append(_to_array(img, spec))
            except (OSError, ValueError) as exc:
                logger.warning("skipping unreadable image %s: %s", f, exc)
                continue
            labels.append(label)
    if not images:
        raise ValueError(f"no readable images under {root}")
    return LabeledImages(np.stack(images), np.asarray(labels, np.int64), classes)


def load_dataset(spec: DatasetSpec) -> LabeledImages:
    if spec.source == "synthetic":
        return synth_generate(spec, np.random.default_rng(spec.seed))
    return load_folder(spec.path, spec)


def to_uint8(images) -> np.ndarray:
    return np.round((np.clip(images, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def save_png(image, path):
    arr = to_uint8(image)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def export_folder(data: LabeledImages, path) -> None:
    """Write a dataset in the ``class_name/*.png`` layout that :func:`load_folder` reads."""
    root = Path(path)
    for label, name in enumerate(data.classes):
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(zip(data.images, data.labels)):
        save_png(img, root / data.classes[label] / f"{i:06d}.png")


# ---------------------------------------------------------------------------
# augmentation


def augment(x: np.ndarray, rng: np.random.Generator, spec: DatasetSpec, force=None) -> np.ndarray:
    """Horizontal flip with probability ``spec.flip_prob``, per image for a batch.

    ``force`` (bool or per-image bool array) overrides the random decision.
    """
    single = x.ndim == 3
    batch = x[None] if single else x
    flips = rng.uniform(size=len(batch)) < spec.flip_prob
    if force is not None:
        flips = np.broadcast_to(np.asarray(force, bool), flips.shape)
    out = batch.copy()
    out[flips] = batch[flips][:, :, ::-1]
    return out[0] if single else out
