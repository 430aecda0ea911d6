"""Lesion segmentation: Gaussian smoothing, Chan-Vese active contours,
lesion selection, bounding-box extraction and ROI normalization."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import BoundingBox, crop, rescale_unit, resize_bilinear, to_grayscale
from .preproc import HAIR_DISK_RADIUS, HAIR_THRESHOLD_FLOOR, MEDIAN_WINDOW, detect_hair_mask, disk, inpaint_hair, median_filter

log = logging.getLogger(__name__)

ROI_SIZE = 64
SEGMENT_SIZE = 256
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, edges replicated."""
    k = gaussian_kernel(sigma)
    r = k.size // 2
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape
    out = src
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(src)
        for i, weight in enumerate(k):
            acc += weight * (padded[i:i + h, :] if axis == 0 else padded[:, i:i + w])
        out = acc
    return out.astype(np.float32)


@dataclass(frozen=True)
class ChanVeseParams:
    mu: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    dt: float = 0.5
    epsilon: float = 1.0
    iterations: int = 300

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ChanVeseResult:
    mask: np.ndarray
    phi: np.ndarray
    iterations: int
    degenerate: bool = False
    energies: list = field(default_factory=list)  # (iteration, energy) checkpoints


def initial_level_set(shape) -> np.ndarray:
    """Signed distance to a centered circle of radius min(H, W)/3, positive inside,
    expressed in units of that radius."""
    h, w = shape
    radius = min(h, w) / 3.0
    rr, cc = np.mgrid[0:h, 0:w]
    dist = np.hypot(rr - (h - 1) / 2.0, cc - (w - 1) / 2.0)
    return (radius - dist) / radius


def region_means(img, inside):
    n_in = np.count_nonzero(inside)
    n_out = inside.size - n_in
    c1 = img[inside].mean() if n_in else 0.0
    c2 = img[~inside].mean() if n_out else 0.0
    return float(c1), float(c2)


def chan_vese_energy(img: np.ndarray, mask: np.ndarray, params: ChanVeseParams = ChanVeseParams()) -> float:
    """Piecewise-constant energy of a binary partition.

    mu * perimeter + lambda1 * sum_inside (f - c1)^2 + lambda2 * sum_outside (f - c2)^2,
    with the perimeter counted as 4-neighbor label transitions.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    c1, c2 = region_means(img, mask)
    m = mask.astype(np.int8)
    perimeter = np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum()
    fit_in = ((img[mask] - c1) ** 2).sum()
    fit_out = ((img[~mask] - c2) ** 2).sum()
    return float(params.mu * perimeter + params.lambda1 * fit_in + params.lambda2 * fit_out)


def _curvature(phi):
    # divergence of grad(phi)/|grad(phi)| with one-sided differences; bounded by 4
    eta = 1e-16
    p = np.pad(phi, 1, mode="edge")
    c = p[1:-1, 1:-1]
    right, left = p[1:-1, 2:], p[1:-1, :-2]
    down, up = p[2:, 1:-1], p[:-2, 1:-1]
    dx0 = (right - left) / 2.0
    dy0 = (down - up) / 2.0
    c_r = 1.0 / np.sqrt(eta + (right - c) ** 2 + dy0 ** 2)
    c_l = 1.0 / np.sqrt(eta + (c - left) ** 2 + dy0 ** 2)
    c_d = 1.0 / np.sqrt(eta + dx0 ** 2 + (down - c) ** 2)
    c_u = 1.0 / np.sqrt(eta + dx0 ** 2 + (c - up) ** 2)
    return c_r * (right - c) - c_l * (c - left) + c_d * (down - c) - c_u * (c - up)


def chan_vese(img: np.ndarray, params: ChanVeseParams = ChanVeseParams(), checkpoint_every: int = 50) -> ChanVeseResult:
    """Two-phase Chan-Vese segmentation of a [0, 1] gray image.

    Explicit gradient descent on the level set with the regularized delta
    eps / (pi (eps^2 + phi^2)); runs exactly ``params.iterations`` steps.
    Returns the mask {phi > 0}.
    """
    f = np.asarray(img, dtype=np.float64)
    phi = initial_level_set(f.shape)
    if np.ptp(f) <= 1e-12:
        log.warning("chan_vese: constant image, segmentation is degenerate")
        return ChanVeseResult(np.zeros(f.shape, bool), phi, 0, degenerate=True)

    eps = params.epsilon
    energies = [(0, chan_vese_energy(f, phi > 0, params))]
    for it in range(1, params.iterations + 1):
        inside = phi > 0
        c1, c2 = region_means(f, inside)
        delta = eps / (np.pi * (eps * eps + phi * phi))
        force = params.mu * _curvature(phi) - params.lambda1 * (f - c1) ** 2 + params.lambda2 * (f - c2) ** 2
        phi = phi + params.dt * delta * force
        if checkpoint_every and it % checkpoint_every == 0:
            energies.append((it, chan_vese_energy(f, phi > 0, params)))

    mask = phi > 0
    c1, c2 = region_means(f, mask)
    degenerate = not mask.any() or mask.all() or abs(c1 - c2) <= 1e-12
    return ChanVeseResult(mask, phi, params.iterations, degenerate, energies)


def connected_components(mask: np.ndarray):
    """8-connected labels; label order follows the row-major first pixel."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return labels, n


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = connected_components(mask)
    if n == 0:
        return np.zeros(labels.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    # argmax returns the first maximum, i.e. the smallest row-major anchor
    return labels == (int(np.argmax(sizes)) + 1)


def select_lesion_mask(mask: np.ndarray, img: np.ndarray) -> np.ndarray:
    """Pick the darker of {mask, complement} and keep its largest component."""
    mask = np.asarray(mask, dtype=bool)
    img = np.asarray(img)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")

    def mean_of(m):
        return float(img[m].mean()) if m.any() else np.inf

    chosen = mask if mean_of(mask) <= mean_of(~mask) else ~mask
    return largest_component(chosen)


def largest_component_bbox(mask: np.ndarray, min_fraction: float = 0.01, max_fraction: float = 0.99) -> BoundingBox:
    """Tight box around the largest 8-connected component.

    Falls back to the full image when that component covers less than
    `min_fraction` of the image, or the foreground covers more than `max_fraction`.
    """
    mask = np.asarray(mask, dtype=bool)
    full = BoundingBox.full(mask.shape)
    comp = largest_component(mask)
    area = np.count_nonzero(comp)
    if area == 0 or area < min_fraction * mask.size or np.count_nonzero(mask) > max_fraction * mask.size:
        return full
    rows = np.flatnonzero(comp.any(axis=1))
    cols = np.flatnonzero(comp.any(axis=0))
    return BoundingBox(int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def extract_roi(img: np.ndarray, box: BoundingBox, size: int = ROI_SIZE) -> np.ndarray:
    """Crop, resize to size x size, rescale to [0, 1]."""
    return rescale_unit(resize_bilinear(crop(img, box), size, size))


@dataclass(frozen=True)
class PipelineConfig:
    median_window: int = MEDIAN_WINDOW
    hair_radius: int = HAIR_DISK_RADIUS
    hair_floor: float = HAIR_THRESHOLD_FLOOR
    segment_size: int = SEGMENT_SIZE
    sigma: float = 1.5
    roi_size: int = ROI_SIZE
    min_fraction: float = 0.01
    max_fraction: float = 0.99
    chan_vese: ChanVeseParams = ChanVeseParams()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        cv = d.pop("chan_vese", {})
        return cls(chan_vese=ChanVeseParams(**cv), **d)


@dataclass
class SegmentationResult:
    roi: np.ndarray                 # (roi_size, roi_size, 3) float32 in [0, 1]
    box: BoundingBox                # in segment_size x segment_size coordinates
    degenerate: bool
    fallback: bool
    hair_mask: np.ndarray
    lesion_mask: np.ndarray
    clean: np.ndarray               # hair-removed, resized RGB image
    iterations: int
    phi_positive: np.ndarray        # raw Chan-Vese foreground, before polarity selection


def segment_pipeline(img: np.ndarray, config: PipelineConfig = PipelineConfig()) -> SegmentationResult:
    """Hair removal, resize, smoothing, Chan-Vese, lesion box, ROI."""
    gray = to_grayscale(img)
    smoothed = median_filter(gray, config.median_window)
    hair = detect_hair_mask(smoothed, disk(config.hair_radius), floor=config.hair_floor)
    if hair.all():
        hair = np.zeros_like(hair)
    clean = inpaint_hair(img, hair)

    n = config.segment_size
    clean = resize_bilinear(clean, n, n)
    blurred = gaussian_blur(to_grayscale(clean), config.sigma) / np.float32(255.0)
    cv = chan_vese(blurred, config.chan_vese)

    if cv.degenerate:
        lesion = np.zeros((n, n), dtype=bool)
    else:
        lesion = select_lesion_mask(cv.mask, blurred)
    box = largest_component_bbox(lesion, config.min_fraction, config.max_fraction)
    fallback = box == BoundingBox.full((n, n))
    roi = extract_roi(clean, box, config.roi_size)
    return SegmentationResult(roi, box, cv.degenerate, fallback, hair, lesion, clean, cv.iterations, cv.mask)
