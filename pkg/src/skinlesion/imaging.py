"""Raster types and the resolution / color / value transforms shared by the pipeline.

Images are plain numpy arrays:

* RGB images: ``uint8`` arrays of shape ``(H, W, 3)``
* gray images: ``float32`` arrays of shape ``(H, W)``
* unit images: ``float32`` arrays of shape ``(H, W, 3)`` with values in [0, 1]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class BoundingBox:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"bounding box must be at least 1x1, got {self.height}x{self.width}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @classmethod
    def full(cls, shape) -> "BoundingBox":
        return cls(0, 0, int(shape[0]), int(shape[1]))

    def fits(self, shape) -> bool:
        return self.top >= 0 and self.left >= 0 and self.bottom <= shape[0] and self.right <= shape[1]

    def shifted(self, dr: int, dc: int) -> "BoundingBox":
        return BoundingBox(self.top + dr, self.left + dc, self.height, self.width)

    def iou(self, other: "BoundingBox") -> float:
        h = min(self.bottom, other.bottom) - max(self.top, other.top)
        w = min(self.right, other.right) - max(self.left, other.left)
        inter = max(h, 0) * max(w, 0)
        union = self.height * self.width + other.height * other.width - inter
        return inter / union


def check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an RGB image of shape (H, W, 3), got {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 RGB data, got {img.dtype}")
    return img


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an 8-bit RGB image, as float32 on the 0-255 scale."""
    img = check_rgb(img)
    r, g, b = LUMA_WEIGHTS
    rgb = img.astype(np.float64)
    return (r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]).astype(np.float32)


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centers, clamped to the valid sample range
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with clamp-to-edge sampling.

    Works for gray ``(H, W)`` and RGB ``(H, W, 3)`` arrays. RGB uint8 input is
    rounded back to uint8; float input stays float32.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    src = img.astype(np.float64)
    if src.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr

    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(np.float32)


def rescale_unit(img: np.ndarray) -> np.ndarray:
    """Map 8-bit RGB to float32 in [0, 1]."""
    img = check_rgb(img)
    return (img.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def crop(img: np.ndarray, box: BoundingBox) -> np.ndarray:
    img = np.asarray(img)
    if not box.fits(img.shape):
        raise ValueError(f"{box} does not fit inside image of shape {img.shape[:2]}")
    return img[box.top:box.bottom, box.left:box.right].copy()


def read_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file to an (H, W, 3) uint8 array.

    Raises OSError for unreadable or corrupt files.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, ValueError, SyntaxError) as e:
        raise OSError(f"cannot decode image {path}: {e}") from e


def write_png(path, img: np.ndarray) -> None:
    """Write uint8 RGB/gray, or a float image in [0, 1], as PNG."""
    from PIL import Image

    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")
