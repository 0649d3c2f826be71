"""Command-line surface: train-cls, gen-masks, train-seg, eval, visualize.

Config precedence is flag > config file > built-in default; flags mirror
TrainConfig keys one-to-one. The run directory defaults to $WEAKSEG_RUN_DIR.
Errors print a single `error: ...` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .classifier import forward, load_classifier
from .datamodel import (
    CONFIG_KEYS,
    ConfigError,
    ImageSample,
    MaskSource,
    TrainConfig,
    WeaksegError,
    load_config,
    parse_config_value,
    save_config,
    validate_config,
)
from .datasets import ingest_directory, load_samples, split, synth_dataset, write_manifest
from .evalkit import ablation_table, evaluate_masks, render_overlay, write_rgb_png
from .pipeline import (
    generate_pseudomasks,
    label_accuracy,
    load_masks,
    load_segnet,
    segnet_masks,
    train_stage1,
    train_stage2,
    write_masks,
)
from .saliency import binarize, cam_map, midlayer_map, resize_image, upsample, write_saliency_png

DEFAULT_RUN_DIR = "runs/default"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config", "overrides for TrainConfig keys")
    group.add_argument("--config", help="key = value config file")
    for key in CONFIG_KEYS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V")


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("data", "real directories or a synthetic set")
    group.add_argument("--pos-dir", help="directory of positive (fire) images")
    group.add_argument("--neg-dir", help="directory of negative images")
    group.add_argument("--mask-dir", help="directory of eval-only gt masks (stem-paired)")
    group.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic samples")
    group.add_argument("--image-size", type=int, default=64, help="synthetic image side")


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    for key in CONFIG_KEYS:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            overrides[key] = parse_config_value(key, raw)
    if getattr(args, "epochs", None) is not None:
        overrides[args.epochs_key] = int(args.epochs)
    if overrides:
        cfg = cfg.replace(**overrides)
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    return cfg


def _resolve_dataset(args, cfg: TrainConfig):
    if args.synthetic is not None:
        manifest = synth_dataset(args.synthetic, args.image_size, cfg.seed)
    elif args.pos_dir and args.neg_dir:
        manifest = ingest_directory(args.pos_dir, args.neg_dir, args.mask_dir)
    else:
        raise ConfigError("provide --synthetic N or both --pos-dir and --neg-dir")
    return split(manifest, cfg.split_fractions, cfg.seed)


def _run_dir(args) -> Path:
    return Path(args.run_dir or os.environ.get("WEAKSEG_RUN_DIR") or DEFAULT_RUN_DIR)


def _cmd_train_cls(args) -> int:
    args.epochs_key = "epochs_stage1"
    cfg = _resolve_config(args)
    run_dir = _run_dir(args)
    manifest = _resolve_dataset(args, cfg)
    train = load_samples(manifest, "train", with_masks=False)
    model, report = train_stage1(train, cfg, run_dir)
    save_config(cfg, run_dir / "stage1" / "config.txt")
    write_manifest(manifest, run_dir / "manifest.txt")
    acc = label_accuracy(model, train)
    print(f"stage1 done: epochs={report.epochs_run} train_acc={acc:.3f} ckpt={report.checkpoint_path}")
    if report.final_losses is not None:
        print(f"final: {report.final_losses.log_line(report.epochs_run)}")
    return 0


def _cmd_gen_masks(args) -> int:
    args.epochs_key = "epochs_stage1"
    cfg = _resolve_config(args)
    tau = cfg.tau
    model = load_classifier(args.checkpoint)
    manifest = _resolve_dataset(args, cfg)
    samples = load_samples(manifest, args.split, with_masks=False)
    source = MaskSource(args.source)
    masks = generate_pseudomasks(model, samples, source, tau)
    out_dir = Path(args.out_dir) if args.out_dir else _run_dir(args) / "masks" / source.value
    count = write_masks(masks, samples, out_dir)
    print(f"wrote {count} masks to {out_dir}")
    return 0


def _cmd_train_seg(args) -> int:
    args.epochs_key = "epochs_stage2"
    cfg = _resolve_config(args)
    run_dir = _run_dir(args)
    manifest = _resolve_dataset(args, cfg)
    train = load_samples(manifest, "train", with_masks=False)
    masks = load_masks(args.masks_dir, train, cfg.tau, MaskSource(args.source))
    net, report = train_stage2(masks, train, cfg, run_dir)
    save_config(cfg, run_dir / "stage2" / "config.txt")
    print(f"stage2 done: epochs={report.epochs_run} ckpt={report.checkpoint_path}")
    if report.final_losses is not None:
        print(f"final pixel loss: {report.final_losses!r}")
    return 0


def _parse_named(values, what: str) -> list[tuple[str, str]]:
    out = []
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"{what} expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out.append((name, path))
    return out


def _cmd_eval(args) -> int:
    args.epochs_key = "epochs_stage1"
    cfg = _resolve_config(args)
    manifest = _resolve_dataset(args, cfg)
    samples = load_samples(manifest, args.split, with_masks=True)
    rows = []
    for name, mask_dir in _parse_named(args.pred_masks, "--pred-masks"):
        masks = load_masks(mask_dir, samples, cfg.tau, MaskSource.MIDLAYER)
        rows.append(evaluate_masks(masks, samples, name, include_negatives=args.include_negatives))
    for name, ckpt in _parse_named(args.seg_checkpoint, "--seg-checkpoint"):
        net = load_segnet(ckpt)
        rows.append(
            evaluate_masks(
                segnet_masks(net, samples), samples, name, include_negatives=args.include_negatives
            )
        )
    if not rows:
        raise ConfigError("nothing to evaluate: give --pred-masks and/or --seg-checkpoint")
    for row in rows:
        print(f"method={row.method_name} mean_iou={row.mean_iou:.2f} n={row.n_samples}")
    if args.table:
        eval_dir = _run_dir(args) / "eval"
        text = ablation_table(rows, sidecar_path=eval_dir / "rows.json")
        (eval_dir / "ablation.txt").write_text(text + "\n")
        print(text)
    return 0


def _cmd_visualize(args) -> int:
    args.epochs_key = "epochs_stage1"
    cfg = _resolve_config(args)
    tau = cfg.tau
    model = load_classifier(args.checkpoint)
    manifest = _resolve_dataset(args, cfg)
    samples = load_samples(manifest, None, with_masks=False)
    by_id = {s.sample_id: s for s in samples}
    wanted = [tok.strip() for tok in args.ids.split(",") if tok.strip()]
    unknown = [sid for sid in wanted if sid not in by_id]
    if unknown:
        raise ConfigError(f"unknown sample ids: {', '.join(unknown)}")
    out_dir = Path(args.out_dir) if args.out_dir else _run_dir(args) / "viz"
    source = MaskSource(args.source)
    for sid in wanted:
        sample = by_id[sid]
        model_in = sample
        if sample.pixels.shape[:2] != model.input_size:
            model_in = ImageSample(
                sid, resize_image(sample.pixels, model.input_size), sample.label
            )
        stack = forward(model, [model_in])[0]
        smap = midlayer_map(stack) if source is MaskSource.MIDLAYER else cam_map(stack)
        smap = upsample(smap, sample.pixels.shape[:2])
        write_saliency_png(smap, out_dir / f"{sid}_{source.value}_saliency.png")
        overlay = render_overlay(sample, binarize(smap, tau).mask)
        write_rgb_png(overlay, out_dir / f"{sid}_{source.value}_overlay.png")
    print(f"wrote {2 * len(wanted)} rasters to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakseg", description="Weakly-supervised fire segmentation toolkit"
    )
    parser.add_argument("--run-dir", help="output directory (default: $WEAKSEG_RUN_DIR)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-cls", help="stage 1: train the classifier on image labels")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--epochs", type=int, help="alias for --epochs-stage1")
    p.set_defaults(handler=_cmd_train_cls)

    p = sub.add_parser("gen-masks", help="generate pseudo-masks from a trained classifier")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--source", default="midlayer", choices=("cam", "midlayer"))
    p.add_argument("--out-dir")
    p.set_defaults(handler=_cmd_gen_masks)

    p = sub.add_parser("train-seg", help="stage 2: train the segmentation network on masks")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--masks-dir", required=True)
    p.add_argument("--source", default="midlayer", choices=("cam", "midlayer"))
    p.add_argument("--epochs", type=int, help="alias for --epochs-stage2")
    p.set_defaults(handler=_cmd_train_seg)

    p = sub.add_parser("eval", help="mean IoU of mask dirs and/or segnet checkpoints")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--pred-masks", action="append", metavar="NAME=DIR")
    p.add_argument("--seg-checkpoint", action="append", metavar="NAME=CKPT")
    p.add_argument("--include-negatives", action="store_true")
    p.add_argument("--table", action="store_true", help="print + write the ablation table")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("visualize", help="saliency grayscale + mask overlay per sample id")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--source", default="midlayer", choices=("cam", "midlayer"))
    p.add_argument("--out-dir")
    p.set_defaults(handler=_cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (WeaksegError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
