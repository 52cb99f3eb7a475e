"""Single-crop multi-resolution sampling and deterministic eval preprocessing.

Images travel as float tensors ``(3, H, W)`` on a unit scale.  All
randomness comes from an explicit ``numpy.random.Generator``; training
samples derive theirs from ``(seed, epoch, sample index)`` so the pipeline
is a pure function of its inputs.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

EVAL_CROP_FRACTION = 0.875
CROP_ATTEMPTS = 10
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp")


@dataclass(frozen=True)
class AugmentationConfig:
    area_range: Tuple[float, float] = (0.08, 1.0)
    aspect_range: Tuple[float, float] = (3 / 4, 4 / 3)
    hflip_probability: float = 0.5
    interpolation: str = "bilinear"
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        lo, hi = self.area_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"area_range must satisfy 0 < lo <= hi <= 1, got {self.area_range}")
        lo, hi = self.aspect_range
        if not 0 < lo <= hi:
            raise ValueError(f"aspect_range must satisfy 0 < lo <= hi, got {self.aspect_range}")
        if not 0 <= self.hflip_probability <= 1:
            raise ValueError("hflip_probability must lie in [0, 1]")
        if self.interpolation != "bilinear":
            raise ValueError("only bilinear interpolation is supported")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean/std need three channels with positive std")


@dataclass(frozen=True)
class CropSpec:
    x: int
    y: int
    w: int
    h: int
    flipped: bool = False

    def inside(self, height: int, width: int) -> bool:
        return (self.w >= 1 and self.h >= 1 and self.x >= 0 and self.y >= 0
                and self.x + self.w <= width and self.y + self.h <= height)


@dataclass
class MultiResolutionSample:
    images: List[torch.Tensor]
    label: int
    crops: List[CropSpec] = field(default_factory=list)


@dataclass
class MultiResolutionBatch:
    images: List[torch.Tensor]  # one (B, 3, r, r) tensor per branch
    labels: torch.Tensor


# ---------------------------------------------------------------------------
# crops and resizing


def sample_crop(source_dims, config: AugmentationConfig, rng: np.random.Generator) -> CropSpec:
    """Random-resized-crop rectangle for a ``(height, width)`` source.

    The area fraction is drawn uniformly from ``area_range``; the aspect
    ratio is drawn uniformly from the part of ``aspect_range`` that keeps
    the rectangle inside the source.  An area with no feasible aspect is
    redrawn, up to ``CROP_ATTEMPTS`` times, before falling back to a
    centered crop.
    """
    height, width = int(source_dims[0]), int(source_dims[1])
    if height < 1 or width < 1:
        raise ValueError("source must be at least 1x1")
    area = height * width
    q = width / height
    for _ in range(CROP_ATTEMPTS):
        frac = rng.uniform(*config.area_range)
        lo = max(config.aspect_range[0], frac * q)
        hi = min(config.aspect_range[1], q / frac)
        if lo > hi:
            continue
        aspect = rng.uniform(lo, hi)
        w = min(width, max(1, int(round(math.sqrt(frac * area * aspect)))))
        h = min(height, max(1, int(round(math.sqrt(frac * area / aspect)))))
        y = int(rng.integers(0, height - h + 1))
        x = int(rng.integers(0, width - w + 1))
        break
    else:
        w, h = _fallback_extent(height, width, config)
        x, y = (width - w) // 2, (height - h) // 2
    flipped = bool(rng.random() < config.hflip_probability)
    return CropSpec(x, y, w, h, flipped)


def _fallback_extent(height, width, config):
    ratio = width / height
    lo, hi = config.aspect_range
    if ratio < lo:
        w, h = width, width / lo
    elif ratio > hi:
        w, h = height * hi, height
    else:
        w, h = width, height
    max_area = config.area_range[1] * height * width
    if w * h > max_area:
        shrink = math.sqrt(max_area / (w * h))
        w, h = w * shrink, h * shrink
    return max(1, min(width, int(round(w)))), max(1, min(height, int(round(h))))


def resize(image: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of a ``(3, H, W)`` image to ``size x size``."""
    if image.shape[-2:] == (size, size):
        return image.clone()
    return F.interpolate(image[None], size=(size, size), mode="bilinear",
                         align_corners=False, antialias=True)[0]


def apply_crop(image: torch.Tensor, crop: CropSpec) -> torch.Tensor:
    if not crop.inside(image.shape[-2], image.shape[-1]):
        raise ValueError(f"crop {crop} falls outside a {tuple(image.shape[-2:])} image")
    patch = image[:, crop.y:crop.y + crop.h, crop.x:crop.x + crop.w]
    return patch.flip(-1) if crop.flipped else patch


def render_multi_resolution(image: torch.Tensor, crop: CropSpec, resolutions: Sequence[int]):
    """Resize one crop (flipped at most once) to every requested side."""
    patch = apply_crop(image, crop)
    return [resize(patch, int(r)) for r in resolutions]


def render_multi_crop(image: torch.Tensor, resolutions: Sequence[int],
                      config: AugmentationConfig, rng: np.random.Generator):
    """Independent crop per resolution; returns ``(images, crops)``."""
    crops = [sample_crop(image.shape[-2:], config, rng) for _ in resolutions]
    images = [resize(apply_crop(image, c), int(r)) for c, r in zip(crops, resolutions)]
    return images, crops


def intermediate_side(r: int) -> int:
    """``r / 0.875`` rounded half-up."""
    return int(math.floor(r / EVAL_CROP_FRACTION + 0.5))


def eval_preprocess(image: torch.Tensor, r: int) -> torch.Tensor:
    """Square bilinear resize to ``round(r / 0.875)`` followed by a central ``r x r`` crop."""
    if r < 1:
        raise ValueError("target side must be positive")
    side = intermediate_side(r)
    big = resize(image, side)
    off = (side - r) // 2
    return big[:, off:off + r, off:off + r]


def normalize(image: torch.Tensor, config: AugmentationConfig) -> torch.Tensor:
    mean = torch.tensor(config.mean, dtype=image.dtype).view(-1, 1, 1)
    std = torch.tensor(config.std, dtype=image.dtype).view(-1, 1, 1)
    return (image - mean) / std


# ---------------------------------------------------------------------------
# datasets


class ArrayDataset:
    """In-memory uint8 ``(N, H, W, 3)`` images with integer labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int = None):
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[-1] != 3 or images.dtype != np.uint8:
            raise ValueError("images must be uint8 with shape (N, H, W, 3)")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        self.num_classes = int(num_classes if num_classes is not None else self.labels.max() + 1)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Tuple[torch.Tensor, int]:
        img = torch.from_numpy(self.images[i]).permute(2, 0, 1).float() / 255.0
        return img, int(self.labels[i])

    def subset(self, idx):
        return ArrayDataset(self.images[idx], self.labels[idx], self.num_classes)


class FileDataset:
    """Images decoded lazily from ``(path, label)`` entries."""

    def __init__(self, entries: Sequence[Tuple[str, int]], num_classes: int = None):
        self.entries = list(entries)
        labels = [lab for _, lab in self.entries]
        self.num_classes = int(num_classes if num_classes is not None else max(labels, default=-1) + 1)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        from PIL import Image

        path, label = self.entries[i]
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0, int(label)


def load_image_folder(root) -> FileDataset:
    """One sub-directory per class, classes numbered in sorted order."""
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    entries = []
    for label, name in enumerate(classes):
        for dirpath, _, files in sorted(os.walk(root / name)):
            for f in sorted(files):
                if f.lower().endswith(IMAGE_EXTENSIONS):
                    entries.append((os.path.join(dirpath, f), label))
    return FileDataset(entries, num_classes=len(classes))


def load_index_file(path) -> FileDataset:
    """Whitespace- or comma-separated ``path label`` lines; relative paths resolve next to the file."""
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        img, label = " ".join(parts[:-1]), int(parts[-1])
        if not os.path.isabs(img):
            img = str(path.parent / img)
        entries.append((img, label))
    return FileDataset(entries)


# ---------------------------------------------------------------------------
# training / evaluation streams


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def make_sample(dataset, index: int, branches: Sequence[int], config: AugmentationConfig,
                rng: np.random.Generator, multi_crop: bool = False) -> MultiResolutionSample:
    image, label = dataset[index]
    if multi_crop:
        images, crops = render_multi_crop(image, branches, config, rng)
    else:
        crop = sample_crop(image.shape[-2:], config, rng)
        images, crops = render_multi_resolution(image, crop, branches), [crop]
    return MultiResolutionSample([normalize(im, config) for im in images], label, crops)


def iterate_batches(dataset, branches: Sequence[int], config: AugmentationConfig, batch_size: int,
                    seed: int, epoch: int, multi_crop: bool = False,
                    drop_last: bool = False) -> Iterator[MultiResolutionBatch]:
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        samples = [make_sample(dataset, int(i), branches, config, sample_rng(seed, epoch, int(i)),
                               multi_crop) for i in idx]
        images = [torch.stack([s.images[k] for s in samples]) for k in range(len(branches))]
        labels = torch.tensor([s.label for s in samples], dtype=torch.long)
        yield MultiResolutionBatch(images, labels)


def preprocess_eval_set(dataset, r: int, config: AugmentationConfig):
    """Stacked eval tensors ``(N, 3, r, r)`` and labels for one resolution."""
    images, labels = [], []
    for i in range(len(dataset)):
        img, lab = dataset[i]
        images.append(normalize(eval_preprocess(img, r), config))
        labels.append(lab)
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)
