"""HAM10000 ingestion, the 7-class label space, fold plans, batching and the ROI cache."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .imaging import read_image
from .nn.io import StructureMismatch, WeightsFormatError, import_weights, load_weights, save_weights
from .segmentation import PipelineConfig, segment_pipeline

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".png")


class DatasetError(ValueError):
    pass


class SkinClass(IntEnum):
    """HAM10000 diagnosis codes; indices follow alphabetical dx order."""
    AKIEC = 0
    BCC = 1
    BKL = 2
    DF = 3
    MEL = 4
    NV = 5
    VASC = 6

    @property
    def code(self) -> str:
        return self.name.lower()

    @classmethod
    def from_code(cls, code: str) -> "SkinClass":
        try:
            return cls[code.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown dx code {code!r}; expected one of {CLASS_CODES}") from None


CLASS_CODES = tuple(c.code for c in SkinClass)
NUM_CLASSES = len(SkinClass)


@dataclass(frozen=True)
class Sample:
    image_id: str
    label: SkinClass
    path: Path | None = None


@dataclass(frozen=True)
class Dataset:
    """Immutable list of samples, with ROIs once materialized.

    `rois` is ``None`` or a float32 array of shape (N, 64, 64, 3) aligned with
    `samples`.
    """
    samples: tuple = ()
    rois: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = [s.image_id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate image_id(s): {dup[:5]}")
        if self.rois is not None and len(self.rois) != len(self.samples):
            raise DatasetError(f"{len(self.rois)} ROIs for {len(self.samples)} samples")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.samples], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.image_id for s in self.samples]

    def histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=NUM_CLASSES)
        return {code: int(n) for code, n in zip(CLASS_CODES, counts)}

    def with_rois(self, rois) -> "Dataset":
        return Dataset(self.samples, np.asarray(rois, dtype=np.float32))

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        rois = None if self.rois is None else self.rois[indices]
        return Dataset(tuple(self.samples[i] for i in indices), rois)

    @classmethod
    def from_arrays(cls, rois, labels, ids=None) -> "Dataset":
        """Wrap in-memory (N, H, W, 3) unit images and integer labels."""
        labels = np.asarray(labels)
        ids = ids if ids is not None else [f"sample_{i:05d}" for i in range(len(labels))]
        samples = tuple(Sample(str(i), SkinClass(int(c))) for i, c in zip(ids, labels))
        return cls(samples, np.asarray(rois, dtype=np.float32))


def _find_image(image_dir: Path, image_id: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        p = image_dir / f"{image_id}{ext}"
        if p.is_file():
            return p
    return None


def load_ham10000(metadata_path, image_dir) -> Dataset:
    """Read the HAM10000 metadata CSV; columns other than image_id and dx are ignored."""
    metadata_path, image_dir = Path(metadata_path), Path(image_dir)
    with open(metadata_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "dx"} - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{metadata_path}: missing column(s) {sorted(missing)}")
        samples, seen = [], {}
        for line, row in enumerate(reader, start=2):
            image_id = row["image_id"].strip()
            try:
                label = SkinClass.from_code(row["dx"])
            except ValueError as e:
                raise DatasetError(f"{metadata_path}:{line}: {e} (row {row})") from None
            if image_id in seen:
                raise DatasetError(f"{metadata_path}:{line}: duplicate image_id {image_id!r} (first on line {seen[image_id]})")
            seen[image_id] = line
            path = _find_image(image_dir, image_id)
            if path is None:
                raise DatasetError(f"image for id {image_id!r} not found in {image_dir} (tried {', '.join(IMAGE_EXTENSIONS)})")
            samples.append(Sample(image_id, label, path))
    if not samples:
        warnings.warn(f"{metadata_path} has no rows; dataset is empty", stacklevel=2)
    ds = Dataset(tuple(samples))
    log.info("loaded %d samples: %s", len(ds), ds.histogram())
    return ds


# folds ----------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray   # sample index -> fold id
    seed: int
    stratified: bool = True

    def __post_init__(self):
        a = np.asarray(self.assignments)
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise ValueError(f"fold ids must lie in [0, {self.k})")

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def counts(self, labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
        """(num_classes, k) sample counts per class and fold."""
        out = np.zeros((num_classes, self.k), dtype=np.int64)
        np.add.at(out, (np.asarray(labels), self.assignments), 1)
        return out


def stratified_kfold(ds_or_labels, k: int = 10, seed: int = 0, stratified: bool = True) -> FoldPlan:
    """Shuffle each class and deal it round-robin over the folds.

    The dealing offset carries over from one class to the next so that total
    fold sizes also differ by at most one. With ``stratified=False`` the whole
    index set is shuffled and dealt at once.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = ds_or_labels.labels if isinstance(ds_or_labels, Dataset) else np.asarray(ds_or_labels)
    rng = np.random.default_rng(seed)
    assign = np.empty(len(labels), dtype=np.int64)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if stratified else [np.arange(len(labels))]
    offset = 0
    for idx in groups:
        idx = rng.permutation(idx)
        assign[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return FoldPlan(k, assign, seed, stratified)


def stratified_subset(ds_or_labels, n: int, seed: int = 0) -> np.ndarray:
    """Sorted indices of an n-sample subset preserving class proportions.

    Per-class quotas use largest-remainder rounding and never exceed a
    class's size; every present class keeps at least one sample when n allows.
    """
    labels = ds_or_labels.labels if isinstance(ds_or_labels, Dataset) else np.asarray(ds_or_labels)
    if n >= len(labels):
        return np.arange(len(labels))
    classes, sizes = np.unique(labels, return_counts=True)
    exact = n * sizes / sizes.sum()
    quota = np.minimum(np.maximum(np.floor(exact).astype(int), 1 if n >= len(classes) else 0), sizes)
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    i = 0
    while quota.sum() < n:
        c = order[i % len(order)]
        if quota[c] < sizes[c]:
            quota[c] += 1
        i += 1
    while quota.sum() > n:
        quota[np.argmax(quota)] -= 1
    rng = np.random.default_rng(seed)
    picked = [rng.choice(np.flatnonzero(labels == c), q, replace=False) for c, q in zip(classes, quota)]
    return np.sort(np.concatenate(picked))


# batching -------------------------------------------------------------------

def to_nchw(rois) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(rois, dtype=np.float32).transpose(0, 3, 1, 2))


def batches(ds: Dataset, indices, batch_size: int = 16, shuffle_seed=None):
    """Yield (x (B, 3, H, W), labels, sample indices); the last batch may be short.

    `shuffle_seed` None keeps the given order.
    """
    if ds.rois is None:
        raise DatasetError("dataset ROIs are not materialized; run roi_cache first")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    indices = np.asarray(indices, dtype=np.int64)
    if shuffle_seed is not None:
        indices = np.random.default_rng(shuffle_seed).permutation(indices)
    labels = ds.labels
    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        yield to_nchw(ds.rois[idx]), labels[idx], idx


# ROI cache ------------------------------------------------------------------
#
# Each ROI file:  magic b"SKLROI\x00\x01" | version uint32 | height, width,
# channels uint32 | float32 data, little-endian, row-major (H, W, C).
# manifest.json records the pipeline config, its hash and the cached ids.

ROI_MAGIC = b"SKLROI\x00\x01"
ROI_VERSION = 1
_ROI_HEADER = struct.Struct("<8sIIII")
MANIFEST = "manifest.json"


def config_hash(config: PipelineConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_roi(path, roi: np.ndarray) -> None:
    roi = np.asarray(roi, dtype="<f4")
    h, w, c = roi.shape
    Path(path).write_bytes(_ROI_HEADER.pack(ROI_MAGIC, ROI_VERSION, h, w, c) + roi.tobytes())


def read_roi(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _ROI_HEADER.size:
        raise ValueError(f"{path}: truncated ROI header")
    magic, version, h, w, c = _ROI_HEADER.unpack_from(blob)
    if magic != ROI_MAGIC or version != ROI_VERSION:
        raise ValueError(f"{path}: not an ROI record (magic {magic!r}, version {version})")
    if len(blob) != _ROI_HEADER.size + 4 * h * w * c:
        raise ValueError(f"{path}: expected {h}x{w}x{c} floats, file has {len(blob) - _ROI_HEADER.size} bytes of data")
    return np.frombuffer(blob, dtype="<f4", offset=_ROI_HEADER.size).reshape(h, w, c).astype(np.float32)


def _segment_file(args):
    path, config = args
    return segment_pipeline(read_image(path), config).roi


@dataclass
class CacheStats:
    computed: int = 0
    reused: int = 0
    invalidated: bool = False


def roi_cache(ds: Dataset, cache_dir, config: PipelineConfig = PipelineConfig(), jobs: int = 1):
    """Materialize every sample's ROI, segmenting only images not yet cached.

    A manifest whose config hash differs from `config` invalidates the whole
    cache (with a warning). Returns (dataset with ROIs, CacheStats).
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    manifest_path = cache_dir / MANIFEST
    entries = {}
    stats = CacheStats()
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config_hash") == digest:
            entries = manifest.get("entries", {})
        else:
            warnings.warn(f"ROI cache {cache_dir} was built with a different pipeline config; recomputing", stacklevel=2)
            stats.invalidated = True

    rois = [None] * len(ds)
    todo = []
    for i, s in enumerate(ds.samples):
        fname = entries.get(s.image_id)
        if fname and (cache_dir / fname).is_file():
            rois[i] = read_roi(cache_dir / fname)
            stats.reused += 1
        else:
            if s.path is None:
                raise DatasetError(f"sample {s.image_id!r} has no image path to segment")
            todo.append(i)

    work = [(ds.samples[i].path, config) for i in todo]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_segment_file, work))
    else:
        results = [_segment_file(w) for w in work]
    for i, roi in zip(todo, results):
        s = ds.samples[i]
        fname = f"{s.image_id}.roi"
        write_roi(cache_dir / fname, roi)
        entries[s.image_id] = fname
        rois[i] = read_roi(cache_dir / fname)
        stats.computed += 1

    manifest_path.write_text(json.dumps({"config_hash": digest, "config": config.to_dict(), "entries": entries},
                                        indent=1, sort_keys=True))
    stacked = np.stack(rois) if rois else np.zeros((0, config.roi_size, config.roi_size, 3), np.float32)
    return ds.with_rois(stacked), stats


__all__ = [
    "SkinClass", "CLASS_CODES", "NUM_CLASSES", "Sample", "Dataset", "DatasetError", "load_ham10000",
    "FoldPlan", "stratified_kfold", "stratified_subset", "batches", "to_nchw", "roi_cache", "CacheStats", "config_hash",
    "read_roi", "write_roi", "save_weights", "load_weights", "import_weights", "WeightsFormatError", "StructureMismatch",
]
