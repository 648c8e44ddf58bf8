"""Command-line front end: ``vcl synth-data | balance | train | evaluate | explain``.

Exit codes: 0 success, 1 usage/config error, 2 unsupported operation,
3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import cam, pnm
from .config import ConfigError, load_run_config
from .data import (
    DatasetError,
    list_dataset_files,
    load_dataset,
    resize_bilinear,
    save_dataset,
    smote_balance,
    stratified_split,
    synth_dataset,
)
from .models import CheckpointError, UnsupportedOperation, load_checkpoint, save_checkpoint
from .pnm import PNMError
from .tensor import NumericError
from .training import append_metrics, emit_curves, evaluate, format_metrics_row, metrics, train

log = logging.getLogger("vcl")

EXIT_OK, EXIT_USAGE, EXIT_UNSUPPORTED, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _hw(text: str) -> tuple:
    parts = text.lower().replace("x", ",").split(",")
    try:
        values = tuple(int(p) for p in parts if p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(values) == 1:
        values = values * 2
    if len(values) != 2 or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive N or HxW, got {text!r}")
    return values


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# -- subcommands ------------------------------------------------------------------------
def cmd_synth_data(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    ds = synth_dataset(args.classes, args.per_class, args.hw, args.seed, args.channels)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {out}")
    return EXIT_OK


def cmd_balance(args) -> int:
    class_names, entries = list_dataset_files(args.data)
    ds = load_dataset(args.data, args.hw)
    before = ds.class_counts()
    balanced = smote_balance(ds, k=args.k, seed=args.seed)
    after = balanced.class_counts()
    out = Path(args.out)
    _prepare_out(out, args.force)
    for name in class_names:
        (out / name).mkdir()
    for i, (label, src) in enumerate(entries):
        dst = out / class_names[label] / src.name
        if args.hw is None or pnm.read(src).shape[:2] == tuple(args.hw):
            shutil.copyfile(src, dst)
        else:
            pnm.write(dst, balanced.images[i])
    suffix = ".pgm" if ds.images.shape[3] == 1 else ".ppm"
    for j in range(len(entries), len(balanced)):
        label = balanced.labels[j]
        pnm.write(out / class_names[label] / f"smote_{j - len(entries):05d}{suffix}", balanced.images[j])
    print("class,before,after")
    for name, b, a in zip(class_names, before, after):
        print(f"{name},{b},{a}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, model=args.model)
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise FileNotFoundError(f"data_root {root} does not exist")
    ds = load_dataset(root, cfg.image_hw)
    channels = cfg.channels or ds.images.shape[3]
    num_classes = cfg.num_classes or ds.num_classes
    if channels != ds.images.shape[3] or num_classes != ds.num_classes:
        raise ConfigError(
            f"config expects {channels} channel(s) / {num_classes} classes, dataset has "
            f"{ds.images.shape[3]} / {ds.num_classes}"
        )
    if cfg.smote == "before_split":
        ds = smote_balance(ds, cfg.smote_k, cfg.seed)
    train_ds, val_ds, test_ds = stratified_split(ds, cfg.split_spec())
    if cfg.smote == "train_only":
        train_ds = smote_balance(train_ds, cfg.smote_k, cfg.seed)
    model_cfg = cfg.model_config(channels, num_classes)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    report = train(model_cfg, (train_ds, val_ds, test_ds), cfg.train_config(), cfg.augment_config())
    for run in report.runs:
        emit_curves(run, out / f"curves_run{run.run_index}.csv")
    save_checkpoint(out / "model.vcl", report.model, ds.class_names)
    append_metrics(out / "metrics.csv", cfg.model, report.test_metrics)
    print(f"selected run {report.run_index}, best epoch {report.best_epoch + 1}")
    print(",".join(("model", "accuracy", "precision", "recall", "f1")))
    print(format_metrics_row(cfg.model, report.test_metrics))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, class_names = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, model.config.image_hw)
    if ds.num_classes != model.num_classes:
        raise ConfigError(f"checkpoint has {model.num_classes} classes, dataset has {ds.num_classes}")
    if ds.images.shape[3] != model.config.channels:
        raise ConfigError(f"checkpoint expects {model.config.channels} channel(s), dataset has {ds.images.shape[3]}")
    _, _, pred = evaluate(model, ds)
    row = format_metrics_row(model.kind, metrics(pred, ds.labels, ds.num_classes, args.average))
    print(row)
    if args.out:
        append_metrics(args.out, model.kind, metrics(pred, ds.labels, ds.num_classes, args.average))
    return EXIT_OK


def cmd_explain(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if model.kind != "cnn":
        raise cam.CamUnsupportedArchitecture(
            "cannot explain a vision transformer with class activation maps: it processes images "
            "as patch sequences and has no convolutional feature maps"
        )
    methods = list(cam.METHODS) if args.method == "all" else [args.method]
    if args.top_k is not None and "faster_scorecam" not in methods:
        print(f"warning: --top-k is ignored for {', '.join(methods)}", file=sys.stderr)
    layers = [name.strip() for name in args.layer.split(",") if name.strip()] or ["auto"]
    if len(layers) > 1 and args.method not in ("layercam", "all"):
        raise UsageError("several layers can only be fused by layercam")

    image = pnm.read(args.image)
    if image.shape[2] != model.config.channels:
        raise ConfigError(f"image has {image.shape[2]} channel(s), model expects {model.config.channels}")
    image = resize_bilinear(image[None], model.config.image_hw)
    top_k = 16 if args.top_k is None else args.top_k
    heatmaps = []
    for method in methods:
        req = cam.CamRequest(model, image, args.target_class, layers[-1], top_k)
        heatmaps.append(cam.explain(req, method, layers if method == "layercam" else None))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for h in heatmaps:
        path = out / cam.heatmap_filename(stem, h.method, h.target_class)
        cam.render_heatmap(h, image[0], args.alpha, path)
        if args.raw:
            pnm.write(out / cam.heatmap_filename(stem, h.method, h.target_class, ".pgm"), h.values)
        print(path)
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic class-per-directory dataset")
    p.add_argument("--classes", type=_positive, required=True)
    p.add_argument("--per-class", type=_positive, required=True)
    p.add_argument("--hw", type=_hw, default=(32, 32), help="N or HxW (default 32)")
    p.add_argument("--channels", type=_positive, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("balance", help="resize and SMOTE-balance a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hw", type=_hw, default=None, help="resize to N or HxW before balancing")
    p.add_argument("--k", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("train", help="split, train and write checkpoint, curves and metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--model", choices=("vit", "cnn"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--average", choices=("macro", "weighted"), default="macro")
    p.add_argument("--out", default=None, help="append the row to this CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="write CAM heatmap overlays for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=("all",) + cam.METHODS, default="all")
    p.add_argument("--layer", default="auto", help="tap name, or comma-separated taps for layercam")
    p.add_argument("--top-k", type=_positive, default=None)
    p.add_argument("--class", dest="target_class", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--raw", action="store_true", help="also write the bare map as PGM")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = int(os.environ.get("VCL_THREADS", "1") or 1)
    try:
        with threadpool_limits(limits=max(threads, 1)):
            return args.func(args)
    except (cam.CamUnsupportedArchitecture, UnsupportedOperation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PNMError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, DatasetError, cam.CamError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
