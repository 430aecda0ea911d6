"""Training loop, accuracy, confusion matrices and the k-fold cross-validation driver."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .architectures import ArchitectureId, build_model
from .dataset import CLASS_CODES, Dataset, batches, stratified_kfold, to_nchw
from .nn.graph import ModelGraph, graph_backward, graph_forward, loss_of, predict_proba
from .nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)

DISPLAY_NAMES = {
    ArchitectureId.MODEL1: ("New", "CNN Model 1"),
    ArchitectureId.MODEL2: ("New", "CNN Model 2"),
    ArchitectureId.MODEL3: ("New", "CNN Model 3"),
    ArchitectureId.MODEL4: ("New", "CNN Model 4"),
    ArchitectureId.VGG16: ("Re-trained", "VGG16 (modified)"),
    ArchitectureId.MOBILENET: ("Re-trained", "MobileNet (modified)"),
    ArchitectureId.DENSENET121: ("Re-trained", "DenseNet-121 (modified)"),
    ArchitectureId.DENSENET169: ("Re-trained", "DenseNet-169 (modified)"),
    ArchitectureId.DENSENET201: ("Re-trained", "DenseNet-201 (modified)"),
    ArchitectureId.RESNET50: ("Re-trained", "ResNet-50 (modified)"),
    ArchitectureId.RESNET101: ("Re-trained", "ResNet-101 (modified)"),
    ArchitectureId.RESNET152: ("Re-trained", "ResNet-152 (modified)"),
}


class ConfigError(ValueError):
    """Raised with every violated field listed."""


class TrainingDiverged(RuntimeError):
    pass


class FoldFailed(RuntimeError):
    def __init__(self, fold, cause):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    architecture: str = "model1"
    num_classes: int = 7
    freeze_prefix: str = ""   # comma-separated node-id prefixes whose parameters stay fixed

    def __post_init__(self):
        problems = []
        if not isinstance(self.epochs, int) or self.epochs < 1:
            problems.append(f"epochs must be an integer >= 1 (got {self.epochs!r})")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            problems.append(f"batch_size must be an integer >= 1 (got {self.batch_size!r})")
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr!r})")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1) (got {getattr(self, name)!r})")
        if not self.eps > 0:
            problems.append(f"eps must be > 0 (got {self.eps!r})")
        try:
            ArchitectureId.parse(self.architecture)
        except ValueError as e:
            problems.append(f"architecture: {e}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2 (got {self.num_classes!r})")
        if problems:
            raise ConfigError("invalid training config:\n  " + "\n  ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def frozen(self) -> tuple:
        return tuple(p.strip() for p in self.freeze_prefix.split(",") if p.strip())


def _step_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _max_activation(fp) -> float:
    vals = [float(np.nanmax(np.abs(a))) for a in fp.activations.values() if a.size]
    return max(vals, default=0.0)


def train(g: ModelGraph, train_idx, ds: Dataset, cfg: TrainConfig, on_epoch=None):
    """Adam + softmax cross entropy for `cfg.epochs` passes over shuffled batches.

    `on_epoch(epoch, mean_loss)` is called after each epoch; returning True
    stops early. Returns (graph, per-epoch mean losses).
    """
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    params = {(nid, name): arr for nid, name, arr in g.named_params()}
    frozen = cfg.frozen
    history = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for b, (x, y, _) in enumerate(batches(ds, train_idx, cfg.batch_size, _step_seed(cfg.seed, epoch))):
            fp = graph_forward(g, x, "train", _step_seed(cfg.seed, epoch, b))
            loss = loss_of(g, fp, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch {b}; "
                                       f"max |activation| = {_max_activation(fp):.4g}")
            grads = graph_backward(g, fp, y)
            trainable = {(nid, k): v for nid, d in grads.items() if not (frozen and nid.startswith(frozen))
                         for k, v in d.items()}
            adam_step(params, trainable, state)
            total += loss * len(y)
            count += len(y)
        history.append(total / max(count, 1))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
        if on_epoch is not None and on_epoch(epoch, history[-1]):
            break
    return g, history


def predict_probs(g: ModelGraph, test_idx, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    test_idx = np.asarray(test_idx, dtype=np.int64)
    return predict_proba(g, to_nchw(ds.rois[test_idx]), batch_size)


def evaluate(g: ModelGraph, test_idx, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax class per sample (np.argmax breaks ties toward the lowest index)."""
    return np.argmax(predict_probs(g, test_idx, ds, batch_size), axis=1)


def _check_pair(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} differ in shape")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.count_nonzero(preds == labels) / preds.size)


def binary_accuracy(tp: int, tn: int, fp: int, fn: int) -> float:
    """(TP + TN) / (TP + TN + FP + FN)."""
    total = tp + tn + fp + fn
    if total == 0:
        raise ValueError("empty confusion counts")
    return (tp + tn) / total


@dataclass
class ConfusionMatrix:
    counts: np.ndarray   # rows = true class, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def row_percent(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return 100.0 * self.counts / np.where(rows == 0, 1, rows)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def to_text(self, labels=CLASS_CODES) -> str:
        labels = list(labels)[:len(self.counts)]
        width = max(7, *(len(s) + 1 for s in labels))
        lines = [" " * width + "".join(f"{s:>{width}}" for s in labels)]
        for name, row in zip(labels, self.row_percent):
            lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}.2f}" for v in row))
        return "\n".join(lines)


def confusion_matrix(preds, labels, num_classes: int = 7) -> ConfusionMatrix:
    preds, labels = _check_pair(preds, labels)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


# cross-validation -----------------------------------------------------------

@dataclass
class EvalReport:
    architecture: str
    k: int
    fold_accuracies: list
    confusion: ConfusionMatrix
    predictions: np.ndarray          # per sample, -1 where never tested
    folds: np.ndarray                # fold id per sample
    fold_seeds: list
    fold_seconds: list
    config: dict = field(default_factory=dict)
    loss_histories: list = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True, default=str).encode()).hexdigest()

    def to_text(self) -> str:
        group, name = DISPLAY_NAMES.get(ArchitectureId(self.architecture), ("", self.architecture))
        lines = [
            "Classification accuracy (in percentages)",
            "",
            f"{'':<12}{'CNN Model':<28}Accuracy (%)",
            f"{group:<12}{name:<28}{100 * self.mean_accuracy:.2f}",
            "",
            "Per-fold accuracy (%): " + ", ".join(f"{100 * a:.2f}" for a in self.fold_accuracies),
            "",
            f"Confusion matrix, row percentages (rows: true class, columns: predicted), pooled over {self.k} folds, "
            f"{self.confusion.total} samples:",
            self.confusion.to_text(),
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["architecture", "fold", "accuracy", "seed", "seconds"])
        for i, (a, s, t) in enumerate(zip(self.fold_accuracies, self.fold_seeds, self.fold_seconds)):
            w.writerow([self.architecture, i, f"{a:.6f}", s, f"{t:.3f}"])
        w.writerow([self.architecture, "mean", f"{self.mean_accuracy:.6f}", "", f"{sum(self.fold_seconds):.3f}"])
        w.writerow([])
        w.writerow(["true\\predicted", *CLASS_CODES[:len(self.confusion.counts)]])
        for name, row in zip(CLASS_CODES, self.confusion.row_percent):
            w.writerow([name, *(f"{v:.2f}" for v in row)])
        return buf.getvalue()

    def to_record(self) -> dict:
        return {
            "architecture": self.architecture,
            "k": self.k,
            "fold_accuracies": list(map(float, self.fold_accuracies)),
            "mean_accuracy": self.mean_accuracy,
            "confusion_counts": self.confusion.counts.tolist(),
            "confusion_row_percent": np.round(self.confusion.row_percent, 6).tolist(),
            "pooled": True,
            "fold_seeds": list(self.fold_seeds),
            "fold_seconds": list(self.fold_seconds),
            "config": self.config,
            "config_hash": self.config_hash,
            "loss_histories": [list(map(float, h)) for h in self.loss_histories],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=1)


def _run_fold(args):
    fold, arch, ds, plan, cfg, build_kwargs = args
    seed = cfg.seed + fold
    start = time.perf_counter()
    try:
        g = build_model(arch, cfg.num_classes, seed, **build_kwargs)
        _, history = train(g, plan.train_indices(fold), ds, replace(cfg, seed=seed))
        preds = evaluate(g, plan.test_indices(fold), ds)
    except Exception as e:
        raise FoldFailed(fold, e) from e
    return fold, seed, preds, history, time.perf_counter() - start


def cross_validate(arch, ds: Dataset, k: int = 10, cfg: TrainConfig = TrainConfig(), *,
                   fold_seed: int = 0, stratified: bool = True, jobs: int = 1, build_kwargs=None) -> EvalReport:
    """k-fold CV: a freshly seeded model per fold (seed = cfg.seed + fold), pooled confusion matrix."""
    arch = ArchitectureId.parse(arch).value
    cfg = replace(cfg, architecture=arch)
    plan = stratified_kfold(ds, k, fold_seed, stratified)
    work = [(f, arch, ds, plan, cfg, dict(build_kwargs or {})) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, work))
    else:
        results = [_run_fold(w) for w in work]

    labels = ds.labels
    predictions = np.full(len(ds), -1, dtype=np.int64)
    accs, seeds, seconds, histories = [], [], [], []
    for fold, seed, preds, history, dt in sorted(results, key=lambda r: r[0]):
        test = plan.test_indices(fold)
        predictions[test] = preds
        accs.append(accuracy(preds, labels[test]) if len(test) else float("nan"))
        seeds.append(seed)
        seconds.append(dt)
        histories.append(history)
        log.info("fold %d: accuracy %.4f (%.1fs)", fold, accs[-1], dt)
    tested = predictions >= 0
    cm = confusion_matrix(predictions[tested], labels[tested], cfg.num_classes)
    config = {"train": cfg.to_dict(), "k": k, "fold_seed": fold_seed, "stratified": stratified,
              "build": dict(build_kwargs or {})}
    return EvalReport(arch, k, accs, cm, predictions, plan.assignments, seeds, seconds, config, histories)


__all__ = [
    "TrainConfig", "ConfigError", "TrainingDiverged", "FoldFailed", "train", "evaluate", "predict_probs",
    "accuracy", "binary_accuracy", "ConfusionMatrix", "confusion_matrix", "EvalReport", "cross_validate",
    "DISPLAY_NAMES",
]
