"""Hair detection (median smoothing + bottom-hat filtering) and hair inpainting.

All neighborhood operations replicate the border pixel (clamp-to-edge).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import check_rgb

HAIR_DISK_RADIUS = 5
MEDIAN_WINDOW = 5
HAIR_THRESHOLD_FLOOR = 10.0


@dataclass(frozen=True)
class StructuringElement:
    """Flat structuring element given as a list of (dr, dc) offsets."""

    radius: int
    offsets: tuple

    def __post_init__(self):
        if (0, 0) not in self.offsets:
            raise ValueError("structuring element must contain the origin")


def disk(radius: int) -> StructuringElement:
    """Discrete disk: all integer offsets with dr^2 + dc^2 <= radius^2."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    offsets = tuple(
        (dr, dc)
        for dr in range(-radius, radius + 1)
        for dc in range(-radius, radius + 1)
        if dr * dr + dc * dc <= radius * radius
    )
    return StructuringElement(radius, offsets)


def _gray(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D gray image, got shape {img.shape}")
    return img


def median_filter(img: np.ndarray, window: int = MEDIAN_WINDOW) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"median window must be odd and >= 1, got {window}")
    img = _gray(img)
    if window == 1:
        return img.copy()
    r = window // 2
    padded = np.pad(img, r, mode="edge")
    windows = sliding_window_view(padded, (window, window))
    return np.median(windows, axis=(-2, -1)).astype(img.dtype)


def _rank_filter(img, se: StructuringElement, reduce):
    img = _gray(img)
    r = se.radius
    h, w = img.shape
    padded = np.pad(img, r, mode="edge")
    out = None
    for dr, dc in se.offsets:
        shifted = padded[r + dr:r + dr + h, r + dc:r + dc + w]
        out = shifted.copy() if out is None else reduce(out, shifted, out=out)
    return out


def dilate(img: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Flat gray dilation: max of img(p + offset) over the element."""
    return _rank_filter(img, se, np.maximum)


def erode(img: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Flat gray erosion: min of img(p + offset) over the element."""
    return _rank_filter(img, se, np.minimum)


def close(img: np.ndarray, se: StructuringElement) -> np.ndarray:
    return erode(dilate(img, se), se)


def bottom_hat(img: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Closing minus the image; responds to dark structures thinner than `se`."""
    img = _gray(img)
    return close(img, se) - img


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a histogram of `values`."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return float(lo)
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    mu0 = s0 / np.maximum(w0, 1)
    mu1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # threshold sits at the upper edge of the last bin in the low class
    return float(edges[np.argmax(between[:-1]) + 1])


def detect_hair_mask(img: np.ndarray, se: StructuringElement | None = None,
                     floor: float = HAIR_THRESHOLD_FLOOR) -> np.ndarray:
    """Boolean hair mask from the bottom-hat response of a gray image (0-255 scale)."""
    se = se or disk(HAIR_DISK_RADIUS)
    response = bottom_hat(img, se)
    threshold = max(otsu_threshold(response), floor)
    mask = response > threshold
    if not mask.any():
        return mask
    return dilate(mask.astype(np.uint8), disk(1)).astype(bool)


def inpaint_hair(img: np.ndarray, mask: np.ndarray, start: int = 5, min_donors: int = 3) -> np.ndarray:
    """Replace masked pixels with the per-channel median of nearby unmasked pixels.

    The search window starts at ``start x start`` and grows by 2 until it holds at
    least `min_donors` unmasked pixels. Windows are clipped at the image border.
    """
    img = check_rgb(img)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    if not mask.any():
        return out
    if mask.all():
        raise ValueError("hair mask covers the whole image; no donor pixels")

    h, w = mask.shape
    values = img.astype(np.float64)
    values[mask] = np.nan
    rows, cols = np.nonzero(mask)
    size = start
    while rows.size:
        r = size // 2
        padded = np.pad(values, ((r, r), (r, r), (0, 0)), constant_values=np.nan)
        # (n, size, size, 3) neighborhoods of the pending pixels
        di = np.arange(size)
        win = padded[rows[:, None, None] + di[None, :, None], cols[:, None, None] + di[None, None, :]]
        donors = np.count_nonzero(~np.isnan(win[..., 0]), axis=(1, 2))
        done = donors >= min_donors
        if done.any():
            med = np.nanmedian(win[done].reshape(done.sum(), -1, 3), axis=1)
            out[rows[done], cols[done]] = np.clip(np.rint(med), 0, 255).astype(np.uint8)
        rows, cols = rows[~done], cols[~done]
        size += 2
        if size > 2 * max(h, w) + 1:
            break
    return out
