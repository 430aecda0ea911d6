"""Command-line entry point.

Commands: segment, trace, train, cv, predict, gradcheck. Settings come from
built-in defaults, then an optional INI file (``--config``), then flags
(``--set section.key=value`` or the dedicated shortcuts); later sources win.
Every run writes its effective config to ``<out>/config.ini`` and a
``manifest.json`` listing its outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("skinlesion")


class UsageError(Exception):
    pass


# configuration --------------------------------------------------------------

def _defaults() -> dict:
    from .evalharness import TrainConfig
    from .segmentation import ChanVeseParams, PipelineConfig

    pipe = {f.name: getattr(PipelineConfig(), f.name) for f in fields(PipelineConfig) if f.name != "chan_vese"}
    cv = {f.name: getattr(ChanVeseParams(), f.name) for f in fields(ChanVeseParams)}
    train = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    return {
        "data": {"metadata": "", "images": "", "cache": "", "synthetic": False, "synthetic_per_class": 32,
                 "synthetic_seed": 0, "subset": 0, "subset_seed": 0},
        "pipeline": pipe,
        "chan_vese": cv,
        "train": train,
        "cv": {"k": 10, "fold_seed": 0, "stratified": True},
        "run": {"out": "runs/latest", "jobs": 1, "debug_images": False},
    }


def _coerce(default, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


class RunConfig:
    """Typed view over the merged settings, serializable to canonical INI."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def build(cls, config_file=None, overrides=()) -> "RunConfig":
        values = _defaults()
        problems = []
        if config_file:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(config_file, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as e:
                raise UsageError(f"cannot read config {config_file}: {e}") from None
            for section in parser.sections():
                for key, text in parser.items(section):
                    problems += cls._assign(values, section, key, text, f"{config_file} [{section}] {key}")
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                problems.append(f"--set {item!r}: expected section.key=value")
                continue
            dotted, text = item.split("=", 1)
            section, key = dotted.split(".", 1)
            problems += cls._assign(values, section.strip(), key.strip(), text, f"--set {dotted}")
        if problems:
            raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
        return cls(values)

    @staticmethod
    def _assign(values, section, key, text, where):
        if section not in values:
            return [f"{where}: unknown section {section!r} (known: {', '.join(values)})"]
        if key not in values[section]:
            return [f"{where}: unknown key {key!r} in [{section}] (known: {', '.join(values[section])})"]
        try:
            values[section][key] = _coerce(values[section][key], text, where)
        except UsageError as e:
            return [str(e)]
        return []

    def __getitem__(self, section):
        return self.values[section]

    def pipeline(self):
        from .segmentation import ChanVeseParams, PipelineConfig
        try:
            return PipelineConfig(chan_vese=ChanVeseParams(**self["chan_vese"]), **self["pipeline"])
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid pipeline settings: {e}") from None

    def train(self):
        from .evalharness import ConfigError, TrainConfig
        try:
            return TrainConfig(**self["train"])
        except ConfigError as e:
            raise UsageError(str(e)) from None

    def to_ini(self) -> str:
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                v = self.values[section][key]
                lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


class Run:
    """Output directory bookkeeping: config echo plus a manifest of written files."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["run"]["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(cfg.to_ini())
        self.outputs = ["config.ini"]
        self.extra = {}

    def path(self, name) -> Path:
        self.outputs.append(str(name))
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def close(self, status: int) -> int:
        record = {"command": self.command, "status": status, "config_hash": self.cfg.digest(),
                  "outputs": self.outputs, **self.extra}
        (self.out / "manifest.json").write_text(json.dumps(record, indent=1))
        return status


# data -----------------------------------------------------------------------

def _dataset(cfg: RunConfig):
    from .dataset import Dataset, load_ham10000, roi_cache, stratified_subset
    from .synthetic import color_patches

    data = cfg["data"]
    if data["synthetic"]:
        x, y = color_patches(data["synthetic_per_class"], size=cfg["pipeline"]["roi_size"], seed=data["synthetic_seed"])
        ds = Dataset.from_arrays(x, y)
    else:
        problems = [f"data.{k} is required (or set data.synthetic = true)" for k in ("metadata", "images") if not data[k]]
        problems += [f"data.{k}: {data[k]} does not exist" for k in ("metadata", "images") if data[k] and not Path(data[k]).exists()]
        if problems:
            raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
        ds = load_ham10000(data["metadata"], data["images"])
    if data["subset"]:
        ds = ds.subset(stratified_subset(ds, data["subset"], data["subset_seed"]))
    if ds.rois is None:
        cache = data["cache"] or str(Path(cfg["run"]["out"]) / "roi_cache")
        ds, stats = roi_cache(ds, cache, cfg.pipeline(), jobs=cfg["run"]["jobs"])
        log.info("ROI cache %s: %d computed, %d reused", cache, stats.computed, stats.reused)
    return ds


# commands -------------------------------------------------------------------

def _box_overlay(img, box):
    out = np.array(img, dtype=np.uint8)
    b = box
    out[b.top, b.left:b.right] = out[b.bottom - 1, b.left:b.right] = (0, 255, 0)
    out[b.top:b.bottom, b.left] = out[b.top:b.bottom, b.right - 1] = (0, 255, 0)
    return out


def cmd_segment(args, cfg: RunConfig) -> int:
    from .dataset import write_roi
    from .imaging import read_image, write_png
    from .segmentation import segment_pipeline

    pipe = cfg.pipeline()
    run = Run("segment", cfg)
    errors = []
    done = 0
    for name in args.images:
        path = Path(name)
        try:
            result = segment_pipeline(read_image(path), pipe)
        except Exception as e:  # keep going; report at the end
            errors.append(f"{path}: {e}")
            continue
        write_roi(run.path(f"{path.stem}.roi"), result.roi)
        if cfg["run"]["debug_images"]:
            write_png(run.path(f"debug/{path.stem}_roi.png"), result.roi)
            write_png(run.path(f"debug/{path.stem}_hair.png"), result.hair_mask.astype(np.uint8) * 255)
            write_png(run.path(f"debug/{path.stem}_lesion.png"), result.lesion_mask.astype(np.uint8) * 255)
            write_png(run.path(f"debug/{path.stem}_phi_sign.png"), result.phi_positive.astype(np.uint8) * 255)
            write_png(run.path(f"debug/{path.stem}_box.png"), _box_overlay(result.clean, result.box))
        done += 1
        print(f"{path}: box {result.box}" + (" (fallback to full image)" if result.fallback else ""))
    print(f"{done} processed, {len(errors)} failed")
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    run.extra["failed"] = errors
    return run.close(EXIT_FAIL if errors else EXIT_OK)


def cmd_trace(args, cfg: RunConfig) -> int:
    from .architectures import build_model, format_table

    g = build_model(args.arch, variant="original" if args.original else "modified")
    print(format_table(g))
    print(f"parameters: {g.parameter_count()}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .architectures import build_model
    from .dataset import save_weights
    from .evalharness import accuracy, evaluate, train

    tcfg = cfg.train()
    ds = _dataset(cfg)
    run = Run("train", cfg)
    g = build_model(tcfg.architecture, tcfg.num_classes, tcfg.seed)
    idx = np.arange(len(ds))
    start = time.perf_counter()

    def report(epoch, loss):
        print(f"epoch {epoch + 1}/{tcfg.epochs} loss {loss:.6f}")

    _, history = train(g, idx, ds, tcfg, on_epoch=report)
    acc = accuracy(evaluate(g, idx, ds), ds.labels)
    save_weights(g, run.path("weights.bin"))
    run.path("loss_history.json").write_text(json.dumps({"architecture": tcfg.architecture, "loss": history,
                                                         "train_accuracy": acc}, indent=1))
    run.extra.update(train_accuracy=acc, seconds=time.perf_counter() - start)
    print(f"training accuracy {100 * acc:.2f}%; weights written to {run.out / 'weights.bin'}")
    return run.close(EXIT_OK)


def cmd_cv(args, cfg: RunConfig) -> int:
    from .evalharness import cross_validate

    tcfg = cfg.train()
    c = cfg["cv"]
    if c["k"] < 2:
        raise UsageError(f"cv.k must be >= 2 (got {c['k']})")
    ds = _dataset(cfg)
    run = Run("cv", cfg)
    report = cross_validate(tcfg.architecture, ds, c["k"], tcfg, fold_seed=c["fold_seed"],
                            stratified=c["stratified"], jobs=cfg["run"]["jobs"])
    report.config["run_config_hash"] = cfg.digest()
    run.path("report.txt").write_text(report.to_text())
    run.path("report.csv").write_text(report.to_csv())
    run.path("report.json").write_text(report.to_json())
    run.extra["mean_accuracy"] = report.mean_accuracy
    print(report.to_text())
    return run.close(EXIT_OK)


def cmd_predict(args, cfg: RunConfig) -> int:
    from .architectures import build_model
    from .dataset import CLASS_CODES, load_weights, to_nchw
    from .imaging import read_image
    from .nn.graph import predict_proba
    from .segmentation import segment_pipeline

    tcfg = cfg.train()
    weights = Path(args.weights)
    if not weights.is_file():
        print(f"error: weights file {weights} not found; run `skinlesion train` first or pass --weights", file=sys.stderr)
        return EXIT_FAIL
    g = build_model(tcfg.architecture, tcfg.num_classes, tcfg.seed)
    load_weights(g, weights)
    roi = segment_pipeline(read_image(args.image), cfg.pipeline()).roi
    probs = predict_proba(g, to_nchw(roi[None]))[0].astype(np.float64)
    k = int(np.argmax(probs))
    print(f"class: {CLASS_CODES[k]} ({k})")
    print("probabilities: " + " ".join(f"{c}={p:.6f}" for c, p in zip(CLASS_CODES, probs)))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    import contextlib

    from .nn.gradcheck import LAYER_KINDS, check_layer, check_small_model, corrupted_conv_backward

    ctx = corrupted_conv_backward() if args.mutate_conv_backward else contextlib.nullcontext()
    results = {}
    with ctx:
        for kind in LAYER_KINDS:
            results[kind] = check_layer(kind)
        results["model1 (shrunk)"] = check_small_model()
    worst_kind, worst = None, -1.0
    for kind, r in results.items():
        print(f"{'PASS' if r.passed else 'FAIL'}  {kind:<18} max relative error {r.max_error:.3e}  ({r.worst})")
        if r.max_error > worst:
            worst_kind, worst = kind, r.max_error
    ok = all(r.passed for r in results.values())
    if not ok:
        print(f"gradient check failed; worst offender {worst_kind} ({results[worst_kind].worst}) "
              f"relative error {worst:.3e}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# argument parsing -----------------------------------------------------------

def _arch(value):
    from .architectures import ArchitectureId
    try:
        return ArchitectureId.parse(value).value
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value settings")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one setting")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("--jobs", type=int, help="worker processes (run.jobs)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--metadata", help="HAM10000 metadata CSV (data.metadata)")
    data.add_argument("--images", help="directory of <image_id>.jpg/.png files (data.images)")
    data.add_argument("--cache", help="ROI cache directory (data.cache)")
    data.add_argument("--synthetic", action="store_true", help="use the separable color-patch set instead of HAM10000")
    data.add_argument("--arch", type=_arch, help="architecture id (train.architecture)")
    data.add_argument("--epochs", type=int)
    data.add_argument("--seed", type=int)

    p = argparse.ArgumentParser(prog="skinlesion", description="Dermatoscopic lesion segmentation and CNN classification.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("segment", parents=[common], help="hair removal, segmentation and ROI extraction")
    s.add_argument("images", nargs="*")
    s.add_argument("--debug-images", action="store_true", help="also write PNGs of the intermediate stages")

    s = sub.add_parser("trace", parents=[common], help="print an architecture's layer/shape table")
    s.add_argument("arch", type=_arch)
    s.add_argument("--original", action="store_true", help="224x224 ImageNet layout instead of the 64x64 one")

    sub.add_parser("train", parents=[common, data], help="train one model on the whole dataset")

    s = sub.add_parser("cv", parents=[common, data], help="k-fold cross-validation report")
    s.add_argument("-k", type=int, help="number of folds (cv.k)")

    s = sub.add_parser("predict", parents=[common], help="classify one image with trained weights")
    s.add_argument("image")
    s.add_argument("--weights", required=True)
    s.add_argument("--arch", type=_arch)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer's backward pass")
    s.add_argument("--mutate-conv-backward", action="store_true", help="negate conv gradients (the check must fail)")
    return p


FLAG_KEYS = {
    "out": "run.out", "jobs": "run.jobs", "metadata": "data.metadata", "images": "data.images",
    "cache": "data.cache", "arch": "train.architecture", "epochs": "train.epochs", "seed": "train.seed", "k": "cv.k",
}

COMMANDS = {"segment": cmd_segment, "trace": cmd_trace, "train": cmd_train, "cv": cmd_cv,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    for attr, dotted in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides.append(f"{dotted}={v}")
    if getattr(args, "synthetic", False):
        overrides.append("data.synthetic=true")
    if getattr(args, "debug_images", False):
        overrides.append("run.debug_images=true")
    try:
        cfg = RunConfig.build(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        if args.verbose:
            log.exception("command failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
