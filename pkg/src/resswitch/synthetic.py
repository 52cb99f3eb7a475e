"""Procedural image data: a 10-class shapes set plus test-pattern images.

The shapes set stands in for a CIFAR-style benchmark (small RGB images,
10 balanced classes) when no real dataset can be fetched.  Several classes
differ only in fine texture (stripe orientation, checker vs. plain), which
makes higher input resolutions genuinely more informative.
"""

from __future__ import annotations

import numpy as np

from .data import ArrayDataset

SHAPE_CLASSES = (
    "disk", "square", "triangle", "ring", "cross",
    "h-stripes", "v-stripes", "checker", "diamond", "two-disks",
)


def _mask(kind, yy, xx, cx, cy, rad, angle, period):
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    square = (np.abs(u) <= rad * 0.85) & (np.abs(v) <= rad * 0.85)
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= rad ** 2
    if kind == "square":
        return square
    if kind == "triangle":
        return (v <= rad * 0.7) & (v >= -rad * 0.9 + 1.8 * np.abs(u))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= rad ** 2) & (d2 >= (0.55 * rad) ** 2)
    if kind == "cross":
        arm = rad * 0.3
        return ((np.abs(u) <= arm) & (np.abs(v) <= rad)) | ((np.abs(v) <= arm) & (np.abs(u) <= rad))
    if kind == "h-stripes":
        return square & (np.floor(v / (period / 2)) % 2 == 0)
    if kind == "v-stripes":
        return square & (np.floor(u / (period / 2)) % 2 == 0)
    if kind == "checker":
        return square & ((np.floor(u / (period / 2)) + np.floor(v / (period / 2))) % 2 == 0)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= rad
    if kind == "two-disks":
        off = rad * 0.55
        r2 = (rad * 0.42) ** 2
        return ((u - off) ** 2 + v ** 2 <= r2) | ((u + off) ** 2 + v ** 2 <= r2)
    raise ValueError(kind)


def render_shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # smooth two-colour background gradient plus pixel noise
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    t = (np.cos(rng.uniform(0, 2 * np.pi)) * xx + np.sin(rng.uniform(0, 2 * np.pi)) * yy) / size
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    rad = rng.uniform(0.28, 0.42) * size
    cx, cy = rng.uniform(0.38, 0.62, 2) * size
    angle = rng.uniform(-0.35, 0.35)
    period = rng.uniform(0.18, 0.24) * size
    fg = rng.uniform(0, 1, 3)
    bg_mean = img.reshape(-1, 3).mean(0)
    if np.abs(fg - bg_mean).sum() < 0.9:
        fg = np.where(bg_mean > 0.5, rng.uniform(0.0, 0.25, 3), rng.uniform(0.75, 1.0, 3))
    m = _mask(kind, yy, xx, cx, cy, rad, angle, period)
    img[m] = fg
    img += rng.normal(0, 0.04, img.shape)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def make_shapes(n: int, size: int = 40, seed: int = 0) -> ArrayDataset:
    """Balanced shapes dataset of ``n`` uint8 images of side ``size``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPE_CLASSES)
    rng.shuffle(labels)
    images = np.stack([render_shape(SHAPE_CLASSES[k], size, rng) for k in labels])
    return ArrayDataset(images, labels, num_classes=len(SHAPE_CLASSES))


def make_blobs(n: int, size: int = 32, seed: int = 0) -> ArrayDataset:
    """Two linearly separable classes: dark vs. bright images with mild noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, 0.75, 0.25)[:, None, None, None]
    imgs = base + rng.normal(0, 0.05, (n, size, size, 3))
    return ArrayDataset((np.clip(imgs, 0, 1) * 255 + 0.5).astype(np.uint8), labels, num_classes=2)


QUADRANT_COLOURS = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])


def quadrant_image(height: int, width: int):
    """Float ``(3, H, W)`` array with four uniquely coloured quadrants.

    Quadrant ids: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    The split sits at ``(height // 2, width // 2)``.
    """
    yy, xx = np.mgrid[0:height, 0:width]
    q = (yy >= height // 2).astype(int) * 2 + (xx >= width // 2).astype(int)
    return QUADRANT_COLOURS[q].transpose(2, 0, 1).astype(np.float32)


def gradient_image(height: int, width: int):
    """Float ``(3, H, W)`` ramp image with distinct per-channel slopes."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    r = xx / max(width - 1, 1)
    g = yy / max(height - 1, 1)
    b = (xx + yy) / max(width + height - 2, 1)
    return np.stack([r, g, 0.25 + 0.5 * np.sin(3 * np.pi * b)]).astype(np.float32)
