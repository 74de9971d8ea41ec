"""Command-line entry point: ``attenlab <command> [flags]``.

Commands: ``synth``, ``train``, ``crossval``, ``eval``, ``cam``, ``gb``.
Exit status is 0 on success, 1 on a usage error, and 2 on a runtime error.
Every flag may also be given in a UTF-8 JSON file passed with ``--config``;
keys mirror the long flag names and explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import secrets
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import export_dataset, load_dataset
from .errors import AttenlabError
from .evaluation import (
    METRIC_COLUMNS,
    _fmt,
    aggregate_binary,
    cross_validate,
    evaluate_predictions,
    hienet_fitter,
    roc,
    write_fold_accuracy_csv,
    write_metrics_csv,
    write_roc_csv,
    MALIGNANT,
)
from .interpret import cam, guided_backprop, save_heatmap
from .model import CLASS_NAMES, PRESETS, build, load_checkpoint, predict, preset, save_checkpoint
from .raster import read_image
from .synth import synth_generate
from .training import TrainConfig, make_batch, train

log = logging.getLogger("attenlab")

DEFAULT_SEED = 7
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class UsageError(Exception):
    """Bad flags, bad config keys, or a missing required option."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# Built-in values for every option; the config file and flags override these.
DEFAULTS = {
    "seed": DEFAULT_SEED,
    "n": 50,
    "size": 64,
    "preset": "hienet-mini",
    "epochs": 20,
    "lr": 0.005,
    "batch_size": 32,
    "patience": 3,
    "decay": 0.5,
    "no_position_attention": False,
    "no_channel_attention": False,
    "folds": 10,
    "jobs": 1,
    "stratified": False,
    "binary": False,
    "target": None,
    "mode": "gray",
}

REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "crossval": ("data", "out"),
    "eval": ("checkpoint", "data", "out"),
    "cam": ("checkpoint", "images", "out"),
    "gb": ("checkpoint", "images", "out"),
}


def _add(p: argparse.ArgumentParser, *flags, help: str, **kw) -> None:
    dest = kw.get("dest") or flags[0].lstrip("-").replace("-", "_")
    if dest in DEFAULTS and DEFAULTS[dest] not in (None, False):
        help = f"{help} (default: {DEFAULTS[dest]})"
    p.add_argument(*flags, default=argparse.SUPPRESS, help=help, **kw)


def _common(p: argparse.ArgumentParser) -> None:
    _add(p, "--seed", type=int, help="random seed; 0 draws one from the OS and prints it")
    _add(p, "--config", type=Path, help="JSON file of flag values; explicit flags take precedence")


def _model_flags(p: argparse.ArgumentParser) -> None:
    _add(p, "--preset", choices=sorted(PRESETS), help="architecture preset")
    _add(p, "--epochs", type=int, help="training epochs")
    _add(p, "--lr", type=float, help="initial Adam learning rate")
    _add(p, "--batch-size", type=int, help="minibatch size")
    _add(p, "--patience", type=int, help="epochs without accuracy gain before the rate is cut")
    _add(p, "--decay", type=float, help="learning-rate multiplier applied on a plateau")
    _add(p, "--no-position-attention", action="store_true", help="drop the position attention branch")
    _add(p, "--no-channel-attention", action="store_true", help="drop the channel attention branch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attenlab", description="Attention CNN training, evaluation, and heatmaps.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic motif dataset")
    _add(p, "--out", type=Path, help="output dataset root")
    _add(p, "--n", type=int, help="images per class")
    _add(p, "--size", type=int, help="image side in pixels")
    _common(p)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add(p, "--data", type=Path, help="dataset root with NE/EP/EH/EA folders")
    _add(p, "--out", type=Path, help="output directory for model.ckpt and history.csv")
    _model_flags(p)
    _common(p)

    p = sub.add_parser("crossval", help="k-fold cross-validation report")
    _add(p, "--data", type=Path, help="dataset root")
    _add(p, "--out", type=Path, help="output directory for metrics.csv and fold_accuracy.csv")
    _add(p, "--folds", type=int, help="number of folds")
    _add(p, "--jobs", type=int, help="folds trained concurrently (capped by ATTENLAB_THREADS)")
    _add(p, "--stratified", action="store_true", help="balance classes across folds")
    _model_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add(p, "--checkpoint", type=Path, help="model checkpoint")
    _add(p, "--data", type=Path, help="dataset root")
    _add(p, "--out", type=Path, help="output directory for metrics.csv (and roc.csv with --binary)")
    _add(p, "--binary", action="store_true", help="also report benign/malignant metrics and the ROC curve")
    _common(p)

    for name, what in (("cam", "class activation maps"), ("gb", "guided backpropagation maps")):
        p = sub.add_parser(name, help=f"write {what} as PNG")
        _add(p, "--checkpoint", type=Path, help="model checkpoint")
        _add(p, "--images", type=Path, nargs="+", help="image files or directories")
        _add(p, "--out", type=Path, help="output directory")
        _add(p, "--target", help="class name or index (default: the predicted class)")
        _add(p, "--mode", choices=("gray", "overlay"), help="grayscale map or colour overlay on the image")
        _common(p)
    return parser


def _read_config(path: Path, allowed: set[str]) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    out = {}
    for key, value in data.items():
        k = key.lstrip("-").replace("-", "_")
        if k not in allowed:
            raise UsageError(f"config {path}: unknown option {key!r}")
        out[k] = value
    return out


def resolve(argv: Sequence[str]) -> tuple[str, dict]:
    """Parse flags and merge them over the config file and built-in defaults."""
    parser = build_parser()
    ns = vars(parser.parse_args(list(argv)))
    command = ns.pop("command")
    sub = parser._subparsers._group_actions[0].choices[command]
    allowed = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
    opts = {k: v for k, v in DEFAULTS.items() if k in allowed}
    if "config" in ns:
        opts.update(_read_config(ns.pop("config"), allowed))
    opts.update(ns)
    for key in REQUIRED[command]:
        if opts.get(key) is None:
            raise UsageError(f"attenlab {command}: --{key.replace('_', '-')} is required")
    if opts["seed"] == 0:
        opts["seed"] = secrets.randbits(31) or 1
    if command in ("cam", "gb"):
        opts["images"] = [Path(p) for p in opts["images"]]
    for key in ("out", "data", "checkpoint"):
        if key in opts:
            opts[key] = Path(opts[key])
    return command, opts


def _configs(opts: dict):
    model_cfg = preset(
        opts["preset"],
        use_position_attention=not opts["no_position_attention"],
        use_channel_attention=not opts["no_channel_attention"],
        seed=opts["seed"],
    )
    train_cfg = TrainConfig(
        lr=opts["lr"],
        decay_factor=opts["decay"],
        patience=opts["patience"],
        batch_size=opts["batch_size"],
        epochs=opts["epochs"],
        seed=opts["seed"],
    )
    return model_cfg, train_cfg


def cmd_synth(opts: dict) -> None:
    ds = synth_generate(opts["n"], opts["size"], opts["seed"])
    export_dataset(ds, opts["out"])
    print(f"wrote {len(ds)} images to {opts['out']}")


def cmd_train(opts: dict) -> None:
    ds = load_dataset(opts["data"])
    model_cfg, train_cfg = _configs(opts)
    model = build(model_cfg)

    def report(epoch, lr, loss, acc):
        print(f"epoch {epoch} lr {lr:.6g} loss {loss:.4f} acc {acc:.4f}", flush=True)

    history = train(model, ds.pixels, ds.labels, train_cfg, on_epoch=report)
    out = opts["out"]
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    history.write_csv(out / "history.csv")
    print(f"wrote {out / 'model.ckpt'} and {out / 'history.csv'}")


def cmd_crossval(opts: dict) -> None:
    ds = load_dataset(opts["data"])
    model_cfg, train_cfg = _configs(opts)
    report = cross_validate(
        ds.pixels,
        ds.labels,
        hienet_fitter(model_cfg, train_cfg),
        folds=opts["folds"],
        seed=opts["seed"],
        stratified=opts["stratified"],
        jobs=opts["jobs"],
        num_classes=model_cfg.num_classes,
    )
    for note in report.warnings:
        print(f"warning: {note}", file=sys.stderr)
    out = opts["out"]
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report, out / "metrics.csv")
    write_fold_accuracy_csv(report, out / "fold_accuracy.csv")
    mean, sd = report.summary("fourclass", "accuracy")
    print(f"four-class accuracy {_fmt(mean)} +/- {_fmt(sd)}")


def cmd_eval(opts: dict) -> None:
    model = load_checkpoint(opts["checkpoint"])
    ds = load_dataset(opts["data"])
    probs = predict(model, make_batch(ds.pixels, model.config.input_size, None))
    result = evaluate_predictions(probs, ds.labels)
    for note in result.warnings:
        print(f"warning: {note}", file=sys.stderr)
    out = opts["out"]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerow(["all", "fourclass", _fmt(result.fourclass_accuracy), "", "", "", "", "",
                    _fmt(result.fourclass_ci[0]), _fmt(result.fourclass_ci[1])])
        if opts["binary"]:
            b = result.binary
            w.writerow(["all", "binary", _fmt(b["accuracy"]), _fmt(b["sensitivity"]), _fmt(b["specificity"]),
                        _fmt(b["ppv"]), _fmt(b["npv"]), _fmt(result.auc),
                        _fmt(result.binary_ci[0]), _fmt(result.binary_ci[1])])
    print(f"four-class accuracy {_fmt(result.fourclass_accuracy)}")
    if opts["binary"]:
        positive = ds.labels == MALIGNANT
        if positive.all() or not positive.any():
            print("warning: ROC undefined, the dataset has a single binary class", file=sys.stderr)
        else:
            write_roc_csv(*roc(aggregate_binary(probs)[:, 1], positive), out / "roc.csv")
        print(f"binary accuracy {_fmt(result.binary['accuracy'])} auc {_fmt(result.auc)}")


def _image_paths(items: Sequence[Path]) -> list[Path]:
    paths = []
    for item in items:
        if item.is_dir():
            found = [p for p in item.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()]
            paths.extend(sorted(found, key=lambda p: p.relative_to(item).as_posix()))
        elif item.is_file():
            paths.append(item)
        else:
            raise AttenlabError(f"no such image or directory: {item}")
    return paths


def _target(value, k: int) -> int | None:
    if value is None:
        return None
    text = str(value)
    if text in CLASS_NAMES:
        return CLASS_NAMES.index(text)
    try:
        idx = int(text)
    except ValueError:
        raise UsageError(f"unknown class {text!r}; use one of {', '.join(CLASS_NAMES)} or an index") from None
    if not 0 <= idx < k:
        raise UsageError(f"class index {idx} outside 0..{k - 1}")
    return idx


def cmd_heatmap(opts: dict, source: str) -> None:
    model = load_checkpoint(opts["checkpoint"])
    k = model.config.num_classes
    fixed = _target(opts["target"], k)
    names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(i) for i in range(k))
    out = opts["out"]
    out.mkdir(parents=True, exist_ok=True)
    method = cam if source == "cam" else guided_backprop
    for path in _image_paths(opts["images"]):
        image = read_image(path)
        c = fixed
        if c is None:
            c = int(predict(model, make_batch([image], model.config.input_size, None))[0].argmax())
        written = save_heatmap(method(model, image, c), image, out, path.stem, names, opts["mode"])
        print(f"wrote {written}")


def run(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, opts = resolve(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help exits through argparse with status 0
        return 0 if exc.code in (0, None) else 1
    print(f"seed {opts['seed']}", flush=True)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if command == "synth":
            cmd_synth(opts)
        elif command == "train":
            cmd_train(opts)
        elif command == "crossval":
            cmd_crossval(opts)
        elif command == "eval":
            cmd_eval(opts)
        else:
            cmd_heatmap(opts, command)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (AttenlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
