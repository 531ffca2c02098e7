"""Command-line entry point: ``abcnet {gen-data,train,eval,infer,gradcheck,flops}``.

Configuration is a flat file of ``key = value`` lines; ``#`` starts a comment.
Keys are namespaced (``model.*``, ``train.*``, ``data.*``, ``paths.*``) and
unknown keys are rejected. Command-line flags (``--seed``, ``--out``,
``--dataset``, ``--checkpoint``, ``--image``) override the matching keys.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numerical failure (non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as data_mod
from . import metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import TOLERANCE, run_battery
from .model import ABC, ABCConfig, count_flops
from .tensor import inject_fault
from .train import AdamWState, NumericalError, TrainConfig, fit, predict

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ROC_THRESHOLDS = 64
FLOPS_DIMS = (16, 32, 64)
# graph node names that --inject-fault may corrupt
FAULT_OPS = ("add", "sub", "mul", "div", "sum", "reshape", "concat", "relu", "sigmoid",
             "conv2d", "pointwise_conv", "fully_connected", "batched_matmul", "softmax",
             "maxpool2x2", "upsample_bilinear2x", "group_norm", "scale")


class UsageError(Exception):
    """Bad flags, malformed config or a missing required key."""


class DataError(Exception):
    """Missing or malformed input files, or inputs that do not fit the model."""


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(n: int) -> Callable[[str], tuple[int, ...]]:
    def parse(text: str) -> tuple[int, ...]:
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated integers, got {text!r}")
        return tuple(int(p) for p in parts)
    return parse


def _floats2(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _resolution(text: str) -> tuple[int, int]:
    """``64x64``, ``64,64`` or a single side length."""
    parts = [p for p in text.lower().replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"resolution must look like HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _optional_float(text: str) -> Optional[float]:
    return None if text.lower() in ("none", "off", "") else float(text)


SCHEMA: dict[str, Callable[[str], object]] = {
    "model.input_dim": int,
    "model.resolution": _resolution,
    "model.encoder_first_layer": str,
    "model.decoder_first_layer": str,
    "model.dilation_rates": _ints(3),
    "model.deep_supervision": _bool,
    "model.normalization": str,
    "model.head_prior": _optional_float,
    "train.epochs": int,
    "train.lr": float,
    "train.batch_size": int,
    "train.seed": int,
    "train.weight_decay": float,
    "train.poly_power": float,
    "train.loss_eps": float,
    "train.hflip": _bool,
    "train.checkpoint_every": int,
    "data.count": int,
    "data.resolution": _resolution,
    "data.targets": _ints(2),
    "data.radius": _ints(2),
    "data.intensity": _floats2,
    "data.background": str,
    "data.noise_sigma": float,
    "data.seed": int,
    "paths.dataset": str,
    "paths.out": str,
    "paths.checkpoint": str,
    "paths.image": str,
}


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            where = f"{source}:{lineno}"
            if not sep or not key:
                raise UsageError(f"{where}: expected key = value, got {raw.strip()!r}")
            if key not in SCHEMA:
                raise UsageError(f"{where}: unknown key {key!r}")
            if key in values:
                raise UsageError(f"{where}: duplicate key {key!r}")
            try:
                values[key] = SCHEMA[key](value)
            except ValueError as exc:
                raise UsageError(f"{where}: bad value for {key}: {exc}") from None
        return cls(values)

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, path)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if k not in self.values]
        if missing:
            raise UsageError(f"config is missing required key(s): {', '.join(missing)}")

    def model_config(self) -> ABCConfig:
        kw = {}
        for key, name in (("model.input_dim", "input_dim"), ("model.resolution", "input_resolution"),
                          ("model.encoder_first_layer", "encoder_first_layer"),
                          ("model.decoder_first_layer", "decoder_first_layer"),
                          ("model.dilation_rates", "dilation_rates"),
                          ("model.deep_supervision", "deep_supervision"),
                          ("model.normalization", "normalization"),
                          ("model.head_prior", "head_prior")):
            if key in self.values:
                kw[name] = self.values[key]
        try:
            return ABCConfig(**kw)
        except ValueError as exc:
            raise UsageError(f"invalid model config: {exc}") from None

    def train_config(self, checkpoint_dir: Optional[str]) -> TrainConfig:
        kw = dict(epochs=self.values["train.epochs"], base_lr=self.values["train.lr"],
                  batch_size=self.values["train.batch_size"], checkpoint_dir=checkpoint_dir)
        for key, name in (("train.seed", "seed"), ("train.weight_decay", "weight_decay"),
                          ("train.poly_power", "poly_power"), ("train.loss_eps", "loss_eps"),
                          ("train.hflip", "hflip"), ("train.checkpoint_every", "checkpoint_every")):
            if key in self.values:
                kw[name] = self.values[key]
        try:
            return TrainConfig(**kw)
        except ValueError as exc:
            raise UsageError(f"invalid train config: {exc}") from None

    def scene_spec(self) -> data_mod.SceneSpec:
        kw = {}
        for key in ("resolution", "targets", "radius", "intensity", "background", "noise_sigma", "seed"):
            if f"data.{key}" in self.values:
                kw[key] = self.values[f"data.{key}"]
        try:
            return data_mod.SceneSpec(**kw)
        except ValueError as exc:
            raise UsageError(f"invalid data config: {exc}") from None


def _path(args, flag: str, cfg: RunConfig, key: str, what: str) -> Path:
    value = getattr(args, flag, None) or cfg.get(key)
    if not value:
        raise UsageError(f"{what} not given (use --{flag} or {key})")
    return Path(value)


def _apply_seed(args, cfg: RunConfig, key: str) -> None:
    if args.seed is not None:
        cfg.values[key] = args.seed


def _load_checkpoint(path: Path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def _read_dataset(root: Path) -> list[data_mod.Sample]:
    try:
        return data_mod.read_dataset(root)
    except (OSError, data_mod.PGMError, ValueError) as exc:
        raise DataError(f"cannot read dataset {root}: {exc}") from None


def _check_resolution(samples, model: ABC, what: str) -> None:
    expected = model.config.input_resolution
    for i, s in enumerate(samples):
        if s.image.shape != expected:
            raise DataError(f"{what} item {i} is {s.image.shape[0]}x{s.image.shape[1]}, "
                            f"model expects {expected[0]}x{expected[1]}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    _apply_seed(args, cfg, "data.seed")
    cfg.require("data.count")
    count = cfg.get("data.count")
    if count < 0:
        raise UsageError("data.count must be >= 0")
    root = _path(args, "out", cfg, "paths.dataset", "output directory")
    spec = cfg.scene_spec()
    try:
        data_mod.write_dataset(data_mod.generate_dataset(spec, count), root)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {root}: {exc}") from None
    print(f"wrote {count} scenes to {root}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    _apply_seed(args, cfg, "train.seed")
    cfg.require("train.epochs", "train.lr", "train.batch_size")
    out = _path(args, "out", cfg, "paths.out", "output directory")
    dataset = _path(args, "dataset", cfg, "paths.dataset", "dataset")
    resume = args.checkpoint or cfg.get("paths.checkpoint")
    if resume:
        model, state = _load_checkpoint(Path(resume))
    else:
        cfg.require("model.input_dim", "model.resolution")
        model, state = ABC(cfg.model_config(), seed=cfg.get("train.seed", 0)), AdamWState()
    train_cfg = cfg.train_config(checkpoint_dir=str(out))
    samples = _read_dataset(dataset)
    if not samples:
        raise DataError(f"dataset {dataset} is empty")
    _check_resolution(samples, model, "dataset")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    records = fit(model, samples, train_cfg, state=state, log_path=str(out / "train_log.csv"))
    final = out / "model.abck"
    save_checkpoint(model, state, final)
    last = records[-1]
    print(f"epochs {len(records)}  loss {last.mean_loss:.5f}  train IoU {last.train_iou:.4f}")
    print(f"checkpoint {final}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = _path(args, "checkpoint", cfg, "paths.checkpoint", "checkpoint")
    dataset = _path(args, "dataset", cfg, "paths.dataset", "dataset")
    roc_path = Path(args.out or cfg.get("paths.out") or "roc.csv")
    model, _ = _load_checkpoint(ckpt)
    samples = _read_dataset(dataset)
    if not samples:
        raise DataError(f"dataset {dataset} is empty")
    _check_resolution(samples, model, "dataset")
    images = np.stack([s.image for s in samples])
    gts = [s.mask for s in samples]
    probs = predict(model, images)[:, 0]
    if not np.isfinite(probs).all():
        raise NumericalError("model produced non-finite probabilities")
    report = metrics.evaluate(probs, gts)
    print(f"N      {report.n}")
    print(f"IoU    {report.iou:.6f}")
    print(f"nIoU   {report.niou:.6f}")
    print(f"F1     {report.f1:.6f}")
    points = metrics.roc_sweep(probs, gts, np.linspace(0.0, 1.0, ROC_THRESHOLDS))
    try:
        roc_path.parent.mkdir(parents=True, exist_ok=True)
        roc_path.write_text("threshold,pd,fa\n" + metrics.format_roc(points) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {roc_path}: {exc}") from None
    print(f"ROC ({len(points)} thresholds) -> {roc_path}")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    ckpt = _path(args, "checkpoint", cfg, "paths.checkpoint", "checkpoint")
    image_path = _path(args, "image", cfg, "paths.image", "input image")
    out = _path(args, "out", cfg, "paths.out", "output mask path")
    model, _ = _load_checkpoint(ckpt)
    try:
        raw = data_mod.load_pgm(image_path)
    except (OSError, data_mod.PGMError) as exc:
        raise DataError(f"cannot read {image_path}: {exc}") from None
    if raw.shape != model.config.input_resolution:
        h, w = model.config.input_resolution
        raise DataError(f"{image_path} is {raw.shape[0]}x{raw.shape[1]}, model expects {h}x{w}")
    prob = predict(model, (raw.astype(np.float32) / 255.0)[None])[0, 0]
    if not np.isfinite(prob).all():
        raise NumericalError("model produced non-finite probabilities")
    mask = metrics.binarize(prob).astype(np.uint8) * 255
    prob_path = out.with_name(out.stem + "_prob.pgm")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        data_mod.save_pgm(mask, out)
        data_mod.save_pgm(data_mod.quantize(prob), prob_path)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from None
    print(f"mask {out} ({int((mask > 0).sum())} positive pixels), probabilities {prob_path}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    if args.inject_fault and args.inject_fault not in FAULT_OPS:
        raise UsageError(f"--inject-fault: unknown op {args.inject_fault!r}")
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            results = run_battery(seed=seed, instances=args.instances, include_network=not args.no_network)
    else:
        results = run_battery(seed=seed, instances=args.instances, include_network=not args.no_network)
    print(f"{'op':<22}{'max rel err':>14}{'n':>4}  status")
    for r in results:
        print(f"{r.name:<22}{r.max_error:>14.3e}{r.instances:>4}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) at or above {TOLERANCE:g}: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks below {TOLERANCE:g}")
    return EXIT_OK


def cmd_flops(args, cfg: RunConfig) -> int:
    if "model.resolution" not in cfg.values:
        cfg.values["model.resolution"] = (256, 256)
    counts = {}
    for c in FLOPS_DIMS:
        cfg.values["model.input_dim"] = c
        counts[c] = count_flops(cfg.model_config())
    h, w = cfg.get("model.resolution")
    print(f"resolution {h}x{w}")
    print(f"{'C':>4}{'FLOPs':>18}{'GFLOPs':>10}")
    for c, n in counts.items():
        print(f"{c:>4}{n:>18d}{n / 1e9:>10.2f}")
    for lo, hi in zip(FLOPS_DIMS, FLOPS_DIMS[1:]):
        print(f"ratio {hi}/{lo}: {counts[hi] / counts[lo]:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "flops": cmd_flops,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, metavar="N", help="overrides the seed in the config")
    common.add_argument("--out", metavar="PATH", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="abcnet", description="ABC infrared small-target segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic PGM dataset")
    p = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    p.add_argument("--dataset", metavar="DIR")
    p.add_argument("--checkpoint", metavar="PATH", help="resume from this checkpoint")
    p = sub.add_parser("eval", parents=[common], help="metrics and ROC sweep of a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--dataset", metavar="DIR")
    p = sub.add_parser("infer", parents=[common], help="predict a mask for one PGM image")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--image", metavar="PATH")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--instances", type=int, default=5, help="random instances per op")
    p.add_argument("--no-network", action="store_true", help="skip the end-to-end network check")
    p.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    sub.add_parser("flops", parents=[common], help="FLOPs for C in 16/32/64 at the configured resolution")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"abcnet {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"abcnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"abcnet {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
