"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import backbones
from .dataset import TASKS, ingest
from .errors import ConfigError, TinyTransferError
from .evaluate import emit_report, evaluate, read_history_csv, write_history_csv
from .features import CACHE_MAGIC, load_cache
from .graph import load_model, manifest_of, read_container, save_model
from .head import TrainConfig, export_head, train
from .pipeline import RunConfig, create, extract_split, extract_train_views, load_backbone, load_config, predict, sample_stream
from .quantize import quantize_model, size_report

log = logging.getLogger("tinytransfer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

# flag dest -> (section, key) in RunConfig; None section means top level
_OVERRIDES = {
    "task": (None, "task"),
    "data": (None, "dataset"),
    "backbone": (None, "backbone"),
    "out": (None, "output"),
    "drop_last": (None, "drop_last"),
    "split_ratio": (None, "split_ratio"),
    "split_seed": (None, "split_seed"),
    "batch_size": (None, "batch_size"),
    "dropout": (None, "dropout"),
    "silence_threshold": (None, "silence_threshold"),
    "no_trim": (None, "trim"),
    "no_quantize": (None, "quantize"),
    "no_cache": (None, "use_cache"),
    "aggregation": (None, "aggregation"),
    "threads": (None, "threads"),
    "lr": ("train", "learning_rate"),
    "epochs": ("train", "epochs"),
    "train_batch_size": ("train", "batch_size"),
    "seed": ("train", "seed"),
    "optimizer": ("train", "optimizer"),
    "no_augment": ("augment", "enabled"),
    "hflip": ("augment", "hflip_prob"),
    "rotation": ("augment", "rotation_max_deg"),
    "zoom": ("augment", "zoom_range"),
    "augment_seed": ("augment", "seed"),
    "augment_variants": ("augment", "variants"),
}
_NEGATED = {"no_trim", "no_quantize", "no_cache", "no_augment"}


def build_config(args) -> RunConfig:
    data = load_config(args.config) if getattr(args, "config", None) else {}
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None or (dest in _NEGATED and not value):
            continue
        if dest in _NEGATED:
            value = False
        if section is None:
            data[key] = value
        else:
            data.setdefault(section, {})[key] = value
    # a --seed with no explicit augment seed drives augmentation too
    if getattr(args, "seed", None) is not None and "seed" not in data.get("augment", {}):
        data.setdefault("augment", {})["seed"] = args.seed
    return RunConfig.from_dict(data)


def _add_data_flags(p, required=True):
    p.add_argument("--task", choices=TASKS, default=None, required=required)
    p.add_argument("--data", help="dataset root (root/<class>/... or root/{train,val}/<class>/...)")
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--split-ratio", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="decode workers (default: logical cores)")
    p.add_argument("--silence-threshold", type=float, default=None, help="RMS below which 25 ms audio frames are dropped")
    p.add_argument("--no-trim", action="store_true", help="keep silent audio frames")


def _add_backbone_flags(p):
    p.add_argument("--backbone", help=".ttml backbone file")
    p.add_argument("--drop-last", type=int, default=None, help="nodes to cut from the end of the backbone")
    p.add_argument("--batch-size", type=int, default=None, help="feature extraction batch size")
    p.add_argument("--no-cache", action="store_true", help="always re-extract features")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--hflip", type=float, default=None)
    p.add_argument("--rotation", type=float, default=None)
    p.add_argument("--zoom", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--augment-seed", type=int, default=None)
    p.add_argument("--augment-variants", type=int, default=None, help="augmented copies per training image (set to --epochs for fresh augmentation every epoch)")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--train-batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)


def make_parser():
    parser = argparse.ArgumentParser(prog="tinytransfer", description="Build image/audio classifiers by transfer learning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a dataset directory and print its manifest")
    _add_data_flags(p)
    p.add_argument("--out", help="write the manifest JSON here instead of stdout")

    p = sub.add_parser("create", help="run the whole pipeline and write a packaged model")
    _add_data_flags(p, required=False)
    _add_backbone_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-quantize", action="store_true")
    p.add_argument("--aggregation", choices=("per_sample", "per_clip"), default=None)

    p = sub.add_parser("extract", help="extract and cache backbone features for train/val")
    _add_data_flags(p, required=False)
    _add_backbone_flags(p)
    p.add_argument("--out", help="directory for train.ttfc / val.ttfc")

    p = sub.add_parser("train", help="train a head on cached features")
    p.add_argument("--train-cache", required=True, nargs="+", help="one cache, or one per augmented copy in epoch order")
    p.add_argument("--val-cache")
    p.add_argument("--activation", choices=("softmax", "sigmoid"), default="softmax")
    p.add_argument("--out", required=True, help="output directory for head.ttml and history.csv")
    _add_train_flags(p)
    p.add_argument("--batch-size", type=int, default=None, help="alias of --train-batch-size")

    p = sub.add_parser("quantize", help="int8-quantize a model's weights and report the size change")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="size report path (default: <out>.size.txt)")

    p = sub.add_parser("eval", help="evaluate a packaged model on a dataset")
    p.add_argument("model")
    _add_data_flags(p, required=False)
    p.add_argument("--which", choices=("val", "train", "all"), default="val")
    p.add_argument("--aggregation", choices=("per_sample", "per_clip"), default=None)
    p.add_argument("--history", help="history.csv to include in the report")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("predict", help="classify one image or WAV file")
    p.add_argument("model")
    p.add_argument("media")
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("inspect", help="print a .ttml/.ttfc manifest")
    p.add_argument("path")

    p = sub.add_parser("fixture", help="write a randomly initialised stand-in backbone")
    p.add_argument("arch", choices=sorted(backbones.FIXTURES))
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    top = p.add_mutually_exclusive_group()
    top.add_argument("--include-top", dest="top", action="store_const", const=True, help="keep the prediction tail (GAP, dense, activation)")
    top.add_argument("--no-top", dest="top", action="store_const", const=False, help="omit the prediction tail")
    return parser


# -- commands -----------------------------------------------------------------


def cmd_ingest(args):
    cfg = build_config(args)
    manifest = ingest(cfg.dataset, cfg.task, cfg.split_ratio, cfg.split_seed)
    text = manifest.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    print(
        f"{len(manifest.classes)} classes, {len(manifest.train)} train / {len(manifest.val)} val files",
        file=sys.stderr,
    )


def cmd_create(args):
    cfg = build_config(args)
    result = create(cfg)
    print(f"model: {result.model_path}")
    print(f"accuracy: {result.report.accuracy * 100:.1f}% on {result.report.sample_count} {result.report.extra['evaluated_on']} items")
    if result.size is not None:
        print(result.size.as_table(), end="")
    for f in result.files:
        print(f"wrote {f}")


def cmd_extract(args):
    cfg = build_config(args)
    manifest = ingest(cfg.dataset, cfg.task, cfg.split_ratio, cfg.split_seed)
    backbone = load_backbone(cfg.backbone, cfg.drop_last)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    views = extract_train_views(backbone, manifest, cfg, out)
    print(f"train: features {views[0].features.shape} x {len(views)} augmented cop{'y' if len(views) == 1 else 'ies'} -> {out}")
    cache = extract_split(backbone, manifest, cfg, "val", out / "val.ttfc")
    print(f"val: features {cache.features.shape} -> {out / 'val.ttfc'}")


def cmd_train(args):
    cache = [load_cache(p) for p in args.train_cache]
    val = load_cache(args.val_cache) if args.val_cache else None
    overrides = {
        "learning_rate": args.lr,
        "epochs": args.epochs,
        "batch_size": args.train_batch_size or args.batch_size,
        "seed": args.seed,
        "optimizer": args.optimizer,
    }
    cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    dropout = args.dropout if args.dropout is not None else (0.5 if args.activation == "softmax" else 0.0)
    head, history = train(cache, val, cfg, args.activation, dropout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(export_head(head, cfg), out / "head.ttml")
    write_history_csv(history, out / "history.csv")
    print(f"final train_acc {history.train_acc[-1]:.4f} val_acc {history.val_acc[-1]:.4f}")
    print(f"wrote {out / 'head.ttml'} and {out / 'history.csv'}")


def cmd_quantize(args):
    graph = load_model(args.model)
    save_model(quantize_model(graph), args.out)
    report = size_report(args.model, args.out)
    report_path = Path(args.report or f"{args.out}.size.txt")
    report_path.write_text(report.as_text())
    print(report.as_table(), end="")


def cmd_eval(args):
    model = load_model(args.model)
    stored = json.loads(model.metadata.get("run_config", "{}"))
    task = args.task or stored.get("task") or model.metadata.get("task")
    if task not in TASKS:
        raise ConfigError("cannot tell the model's task; pass --task")
    stored["task"] = task
    for key, value in (
        ("dataset", args.data),
        ("split_ratio", args.split_ratio),
        ("split_seed", args.split_seed),
        ("threads", args.threads),
        ("silence_threshold", args.silence_threshold),
        ("aggregation", args.aggregation),
    ):
        if value is not None:
            stored[key] = value
    if args.no_trim:
        stored["trim"] = False
    cfg = RunConfig.from_dict(stored)
    manifest = ingest(cfg.dataset, cfg.task, cfg.split_ratio, cfg.split_seed)
    items = {"val": manifest.paths("val"), "train": manifest.paths("train")}.get(args.which) or (
        manifest.paths("train") + manifest.paths("val")
    )
    report = evaluate(model, sample_stream(items, cfg, augment=False), cfg.aggregation, manifest.classes)
    report.model_bytes = Path(args.model).stat().st_size
    history = read_history_csv(args.history) if args.history else None
    files = emit_report(report, history, args.out)
    print(f"accuracy: {report.accuracy * 100:.1f}% on {report.sample_count} items")
    for f in files:
        print(f"wrote {f}")


def cmd_predict(args):
    labels, probs, label = predict(args.model, args.media)
    print(label)
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[: args.top_k]
    for i in order:
        print(f"  {labels[i]:<20} {probs[i]:.6f}")


def cmd_inspect(args):
    path = Path(args.path)
    magic = path.read_bytes()[:4]
    if magic == CACHE_MAGIC:
        manifest, _ = read_container(path.read_bytes(), magic=CACHE_MAGIC)
    else:
        manifest = manifest_of(path)
    print(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_fixture(args):
    build = backbones.FIXTURES[args.arch]
    kwargs = {} if args.top is None else {"include_top": args.top}
    graph = build(seed=args.seed, **kwargs)
    size = save_model(graph, args.out)
    print(f"{args.arch}: {len(graph.nodes)} nodes, {graph.weight_count():,d} weights, {size:,d} bytes -> {args.out}")


COMMANDS = {
    "ingest": cmd_ingest,
    "create": cmd_create,
    "extract": cmd_extract,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "inspect": cmd_inspect,
    "fixture": cmd_fixture,
}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except TinyTransferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
