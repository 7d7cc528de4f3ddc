"""Synthetic segmentation scenes with controllable object-scale distributions.

Images are textured backgrounds with one or more textured geometric objects.
Every image is drawn from its own counter-derived random stream, so a dataset
is a pure function of ``(spec, seed)`` and the train/val/test splits never
share a stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import ConfigError

SHAPES = ("circle", "square", "triangle")
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class DatasetSpec:
    image_size: int = 64
    n_train: int = 64
    n_val: int = 16
    n_test: int = 32
    n_classes: int = 0  # 0: binary foreground/background; K: shape type -> class 1..K
    min_objects: int = 1
    max_objects: int = 2
    radius_dist: str = "loguniform"  # loguniform | uniform
    r_min: float = 2.0
    r_max: float = 24.0
    bg_sigma: float = 2.5  # correlation length of the background texture (px)
    fg_sigma: float = 0.7  # correlation length of the object texture (px)
    fg_shift: float = 0.25  # mean colour offset of objects, in texture std units

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image size too small: {self.image_size}")
        if not 0 < self.r_min <= self.r_max:
            raise ConfigError(f"need 0 < r_min <= r_max, got {self.r_min}, {self.r_max}")
        if self.radius_dist not in ("loguniform", "uniform"):
            raise ConfigError(f"unknown radius distribution {self.radius_dist!r}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.n_classes < 0 or self.n_classes > len(SHAPES):
            raise ConfigError(f"n_classes must be in [0, {len(SHAPES)}], got {self.n_classes}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    def radius_distribution(self):
        if self.radius_dist == "loguniform":
            return stats.loguniform(self.r_min, self.r_max)
        return stats.uniform(self.r_min, self.r_max - self.r_min)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # B x 3 x S x S
    labels: np.ndarray  # B x S x S, ints in [0, K] (binary: {0, 1})
    radii: list = field(default_factory=list)
    n_classes: int = 0

    def __len__(self) -> int:
        return len(self.images)

    @property
    def masks(self) -> np.ndarray:
        return (self.labels > 0).astype(np.float64)


def image_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS[split], index]))


def sample_layout(spec: DatasetSpec, rng: np.random.Generator) -> list[tuple[str, float, float, float]]:
    """Objects as (shape, radius, cy, cx); radii are drawn first."""
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    if spec.radius_dist == "loguniform":
        radii = np.exp(rng.uniform(np.log(spec.r_min), np.log(spec.r_max), n))
    else:
        radii = rng.uniform(spec.r_min, spec.r_max, n)
    kinds = SHAPES[: spec.n_classes or len(SHAPES)]
    objs = []
    S = spec.image_size
    for r in radii:
        shape = kinds[int(rng.integers(len(kinds)))]
        margin = min(r, S / 2 - 1)
        cy, cx = rng.uniform(margin, S - margin, 2)
        objs.append((shape, float(r), float(cy), float(cx)))
    return objs


def _shape_mask(shape: str, r: float, cy: float, cx: float, S: int) -> np.ndarray:
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        h = r / np.sqrt(2) * 1.2
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    # upward triangle inscribed in the radius-r circle
    top = -r
    base = r / 2
    half_w = (dy - top) / (base - top) * (r * np.sqrt(3) / 2)
    return (dy >= top) & (dy <= base) & (np.abs(dx) <= half_w)


def _texture(rng: np.random.Generator, S: int, sigma: float) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal((3, S, S)), sigma=(0, sigma, sigma), mode="wrap")
    return t / (t.std(axis=(1, 2), keepdims=True) + 1e-12)


def render(spec: DatasetSpec, rng: np.random.Generator):
    objs = sample_layout(spec, rng)
    S = spec.image_size
    colour = rng.normal(0.0, 0.3, (3, 1, 1))
    bg = _texture(rng, S, spec.bg_sigma) + colour
    fg = _texture(rng, S, spec.fg_sigma) + colour + spec.fg_shift * rng.choice([-1.0, 1.0], (3, 1, 1))
    image = bg.copy()
    labels = np.zeros((S, S), dtype=np.int64)
    for shape, r, cy, cx in objs:
        m = _shape_mask(shape, r, cy, cx, S)
        image[:, m] = fg[:, m]
        labels[m] = SHAPES.index(shape) + 1 if spec.n_classes else 1
    return image, labels, [o[1] for o in objs]


def gen_synthetic(spec: DatasetSpec, seed: int, split: str = "train") -> SyntheticDataset:
    spec.validate()
    n = getattr(spec, f"n_{split}")
    S = spec.image_size
    images = np.zeros((n, 3, S, S))
    labels = np.zeros((n, S, S), dtype=np.int64)
    radii = []
    for i in range(n):
        images[i], labels[i], r = render(spec, image_rng(seed, split, i))
        radii.extend(r)
    return SyntheticDataset(images, labels, radii, spec.n_classes)


def object_radii(spec: DatasetSpec, seed: int, n_images: int, split: str = "train") -> np.ndarray:
    """Radii of every object in the first ``n_images`` of a split, without rendering."""
    spec.validate()
    out = []
    for i in range(n_images):
        out.extend(o[1] for o in sample_layout(spec, image_rng(seed, split, i)))
    return np.array(out)


def flip_batch(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator):
    """Random horizontal flip per sample."""
    flip = rng.random(len(images)) < 0.5
    images = images.copy()
    labels = labels.copy()
    images[flip] = images[flip][..., ::-1]
    labels[flip] = labels[flip][..., ::-1]
    return images, labels
