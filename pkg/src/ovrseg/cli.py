"""Command-line entry point: train, eval, viz-corr, and report subcommands.

Exit codes: 0 on success, 2 for configuration or validation problems, 3 for
runtime numerical failures. File outputs are written atomically so reruns
overwrite cleanly. The OVRSEG_OUTPUT_ROOT environment variable, when set,
prefixes every relative output path.
"""
from __future__ import annotations

import argparse
import io
import os
import sys

import numpy as np
import torch
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, write_atomic
from .config import ConfigError, _build_section, config_to_dict, load_config
from .data import DatasetManifest, load_manifest, load_sample, reindex_mask_to_subset, tile
from .evaluation import (
    ConfusionAccumulator,
    average_reports,
    parse_kv_report,
    predict,
    report_to_csv,
    report_to_kv,
    split_miou,
)
from .model import ModelConfig, SegmentationModel
from .registry import ClassRegistry
from .training import NonFiniteLossError, Trainer
from .viz import class_magnitude, overlay_heatmap, render_heatmap

OUTPUT_ROOT_ENV = "OVRSEG_OUTPUT_ROOT"


def resolve_output(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _registry_snapshot(registry: ClassRegistry) -> dict:
    return {
        "names": list(registry.names),
        "seen_flags": list(registry.seen_flags),
        "templates": list(registry.templates),
    }


def _registry_from_snapshot(d: dict) -> ClassRegistry:
    return ClassRegistry(
        names=tuple(d["names"]),
        seen_flags=tuple(bool(b) for b in d["seen_flags"]),
        templates=tuple(d["templates"]),
    )


def model_from_checkpoint(path: str) -> tuple[SegmentationModel, dict, int]:
    state, cfg, iteration = load_checkpoint(path)
    try:
        model_cfg = _build_section(ModelConfig, cfg["run"]["model"], "model")
        registry = _registry_from_snapshot(cfg["train_registry"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint config snapshot unusable: {e}") from e
    model = SegmentationModel(model_cfg, registry)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, iteration


def _tiled_samples(manifest: DatasetManifest, phase: str,
                   subset: ClassRegistry | None = None) -> list[tuple[torch.Tensor, torch.Tensor]]:
    full = manifest.registry()
    out = []
    for i in range(len(manifest.samples)):
        image, mask = load_sample(manifest, i, phase=phase)
        if subset is not None:
            mask = reindex_mask_to_subset(mask, full, subset)
        out.extend(tile(image, mask, manifest.tile_px))
    return out


def _normalize_image_file(path: str, normalization: dict) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    mean = np.asarray(normalization["mean"], dtype=np.float32)
    std = np.asarray(normalization["std"], dtype=np.float32)
    return torch.from_numpy((arr / 255.0 - mean) / std)


def _save_png_atomic(path: str, rgb: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    write_atomic(path, buf.getvalue())


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.model.seed = args.seed
        config.train.seed = args.seed
    if args.max_iters is not None:
        config.train.max_iters = args.max_iters
    if args.output_dir is not None:
        config.output_dir = args.output_dir
    config.require_manifest()
    out_dir = resolve_output(config.output_dir)
    os.makedirs(out_dir, exist_ok=True)

    torch.manual_seed(config.seed)
    manifest = load_manifest(config.manifest)
    registry_train = manifest.registry().seen_subset()
    model = SegmentationModel(config.model, registry_train)
    samples = _tiled_samples(manifest, phase="train", subset=registry_train)
    trainer = Trainer(model, samples, config.train)

    snapshot = {"run": config_to_dict(config), "train_registry": _registry_snapshot(registry_train)}
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    log_path = os.path.join(out_dir, "loss_log.csv")
    lines: list[str] = []

    def flush_outputs(iteration: int) -> None:
        save_checkpoint(ckpt_path, model.state_dict(), snapshot, iteration)
        write_atomic(log_path, ("\n".join(lines) + "\n").encode())

    for step in range(1, config.train.max_iters + 1):
        record = trainer.step()
        lines.append(record.as_line())
        if step % config.train.checkpoint_interval == 0:
            flush_outputs(step)
    flush_outputs(config.train.max_iters)
    print(f"trained {config.train.max_iters} iters; checkpoint {ckpt_path}; log {log_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, _, iteration = model_from_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    full = manifest.registry()
    registry = full.seen_subset() if args.phase == "train" else full
    subset = registry if args.phase == "train" else None
    acc = ConfusionAccumulator(registry.n_classes)
    for image, mask in _tiled_samples(manifest, phase=args.phase, subset=subset):
        acc.add(predict(model.infer(image, registry)), mask)
    report = split_miou(acc.per_class_iou(), registry)
    out_dir = resolve_output(args.out_dir if args.out_dir else os.path.dirname(args.checkpoint) or ".")
    os.makedirs(out_dir, exist_ok=True)
    extra = {"dataset": manifest.name, "phase": args.phase, "iteration": str(iteration)}
    kv_path = os.path.join(out_dir, f"report_{args.phase}.kv")
    csv_path = os.path.join(out_dir, f"report_{args.phase}.csv")
    write_atomic(kv_path, report_to_kv(report, extra=extra).encode())
    write_atomic(csv_path, report_to_csv(report).encode())
    print(f"wrote {kv_path} and {csv_path}")
    return 0


def cmd_viz_corr(args: argparse.Namespace) -> int:
    model, _, _ = model_from_checkpoint(args.checkpoint)
    if args.manifest:
        manifest = load_manifest(args.manifest)
        registry = manifest.registry()
        normalization = manifest.normalization
    else:
        registry = model.registry_train
        normalization = {"mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]}
    if args.class_name not in registry.names:
        print(f"unknown class {args.class_name!r}; known classes: {', '.join(registry.names)}",
              file=sys.stderr)
        return 2
    image = _normalize_image_file(args.image, normalization)
    text = model.encode_classes(registry)
    with torch.no_grad():
        out = model(image, text, with_semantic=False)
    magnitude = class_magnitude(out.refined, registry.index_of(args.class_name))
    heat = render_heatmap(magnitude, image.shape[0])
    out_path = resolve_output(args.out)
    _save_png_atomic(out_path, heat)
    written = [out_path]
    if args.overlay:
        with Image.open(args.image) as im:
            base = np.asarray(im.convert("RGB"), dtype=np.uint8)
        overlay_path = resolve_output(args.overlay)
        _save_png_atomic(overlay_path, overlay_heatmap(base, heat))
        written.append(overlay_path)
    print("wrote " + " and ".join(written))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as f:
            reports.append(parse_kv_report(f.read()))
    averaged = average_reports(reports)
    text = report_to_kv(averaged, extra={"n_reports": str(len(reports))})
    if args.out:
        out_path = resolve_output(args.out)
        write_atomic(out_path, text.encode())
        print(f"wrote {out_path}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovrseg",
        description="Open-vocabulary remote-sensing segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train from a YAML run config")
    p_train.add_argument("config", help="path to run config")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--max-iters", type=int, default=None, help="override iteration count")
    p_train.add_argument("--output-dir", default=None, help="override output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("manifest")
    p_eval.add_argument("--phase", choices=("train", "eval"), default="eval",
                        help="eval scores all classes; train scores the seen subset")
    p_eval.add_argument("--out-dir", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_viz = sub.add_parser("viz-corr", help="render a refined-correlation heatmap")
    p_viz.add_argument("checkpoint")
    p_viz.add_argument("image")
    p_viz.add_argument("class_name")
    p_viz.add_argument("out")
    p_viz.add_argument("--manifest", default=None, help="registry/normalization source")
    p_viz.add_argument("--overlay", default=None, help="also write an overlay image here")
    p_viz.set_defaults(func=cmd_viz_corr)

    p_report = sub.add_parser("report", help="average metric reports across datasets")
    p_report.add_argument("reports", nargs="+", help="key-value report files")
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NonFiniteLossError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
