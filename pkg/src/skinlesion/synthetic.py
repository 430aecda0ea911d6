"""Synthetic phantoms with known ground truth, used by tests and demos."""
from __future__ import annotations

import numpy as np

from .imaging import BoundingBox


def disk_mask(shape, center, radius) -> np.ndarray:
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius * radius


def mask_bbox(mask: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def noisy_disk(size=256, center=None, radius=60, fg=0.8, bg=0.2, noise=0.02, seed=0):
    """Gray [0, 1] image of a disk plus Gaussian noise; returns (image, true mask)."""
    rng = np.random.default_rng(seed)
    center = center if center is not None else ((size - 1) / 2, (size - 1) / 2)
    truth = disk_mask((size, size), center, radius)
    img = np.where(truth, fg, bg) + rng.normal(0.0, noise, (size, size))
    return img, truth


def stroke_mask(shape, rng, count=3, width=3) -> np.ndarray:
    """Random quadratic Bezier strokes of the given pixel width."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    half = (width - 1) / 2
    rr, cc = np.mgrid[-int(np.ceil(half)):int(np.ceil(half)) + 1, -int(np.ceil(half)):int(np.ceil(half)) + 1]
    brush = [(dr, dc) for dr, dc in zip(rr.ravel(), cc.ravel()) if max(abs(dr), abs(dc)) <= half]
    for _ in range(count):
        p0, p1, p2 = (rng.uniform([0, 0], [h - 1, w - 1]) for _ in range(3))
        t = np.linspace(0.0, 1.0, 4 * (h + w))[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        pts = np.rint(pts).astype(int)
        for dr, dc in brush:
            r = np.clip(pts[:, 0] + dr, 0, h - 1)
            c = np.clip(pts[:, 1] + dc, 0, w - 1)
            mask[r, c] = True
    return mask


def skin_texture(shape, rng, base=(205, 160, 140), amplitude=12.0, noise=3.0) -> np.ndarray:
    """Smooth low-frequency skin-colored texture as float RGB."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field = np.zeros(shape)
    for _ in range(4):
        fy, fx = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    field *= amplitude / 4
    img = np.asarray(base, dtype=np.float64)[None, None, :] + field[..., None]
    return img + rng.normal(0.0, noise, (h, w, 3))


def lesion_phantom(seed=0, shape=(320, 360), hair_count=4, hair_width=3):
    """Skin patch with a dark disk-shaped lesion and dark hair strokes.

    Returns (rgb uint8 image, lesion mask, hair mask).
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    img = skin_texture(shape, rng)
    radius = rng.uniform(0.2, 0.3) * min(h, w)
    center = (h / 2 + rng.uniform(-0.1, 0.1) * h, w / 2 + rng.uniform(-0.1, 0.1) * w)
    lesion = disk_mask(shape, center, radius)
    color = np.array([110, 70, 55]) + rng.uniform(-15, 15, 3)
    img[lesion] = color + rng.normal(0.0, 6.0, (lesion.sum(), 3))
    hair = stroke_mask(shape, rng, hair_count, hair_width)
    img[hair] = np.array([45, 35, 30]) + rng.normal(0.0, 4.0, (hair.sum(), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), lesion, hair


def color_patches(per_class=32, n_classes=7, size=64, noise=0.05, seed=0):
    """Separable toy set: each class is a distinct constant hue plus noise.

    Returns (images float32 (N, size, size, 3) in [0, 1], labels int64).
    """
    rng = np.random.default_rng(seed)
    hues = np.linspace(0.0, 1.0, n_classes, endpoint=False)
    palette = np.stack([_hue_to_rgb(hh) for hh in hues])
    labels = np.repeat(np.arange(n_classes), per_class)
    images = palette[labels][:, None, None, :] + rng.normal(0.0, noise, (labels.size, size, size, 3))
    return np.clip(images, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)


def _hue_to_rgb(hue, sat=0.7, val=0.8):
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6) % 6
    return val - val * sat * np.clip(np.minimum(k, 4 - k), 0, 1)
