"""Command-line interface: train, predict, eval, phantoms, inspect."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .complexity import flop_breakdown, param_breakdown
from .config import PipelineConfig, TASKS
from .io import ingest, write_raw
from .model_io import load_model, save_model
from .phantom import make_phantoms
from .pipeline import evaluate, predict, train


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.lower().split("x"))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected HxWxC, got {text!r}")
    return parts


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        config = PipelineConfig.from_json(Path(args.config).read_text())
    else:
        config = PipelineConfig()
    overrides = {}
    if getattr(args, "task", None):
        overrides["task"] = args.task
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        raw = config.to_dict()
        raw.update(overrides)
        config = PipelineConfig.from_dict(raw)
    return config


def _cmd_train(args) -> int:
    config = _load_config(args)
    cases = ingest(args.data)
    print(f"training task={config.task} seed={config.seed} on {len(cases)} cases")
    model = train(cases, config)
    save_model(model, args.out)
    params = param_breakdown(model)
    print(f"saved {args.out}: {params['total']} parameters "
          f"({params['saab']} saab + {params['trees']} tree)")
    return 0


def _mask_boundary(labels2d: np.ndarray) -> np.ndarray:
    edge = np.zeros_like(labels2d, dtype=bool)
    edge[:-1, :] |= labels2d[:-1, :] != labels2d[1:, :]
    edge[1:, :] |= labels2d[1:, :] != labels2d[:-1, :]
    edge[:, :-1] |= labels2d[:, :-1] != labels2d[:, 1:]
    edge[:, 1:] |= labels2d[:, 1:] != labels2d[:, :-1]
    return edge & (labels2d > 0)


def _write_overlays(out_dir: Path, case, labels: np.ndarray) -> None:
    from PIL import Image

    gray = case.image.data[..., 0]
    lo, hi = gray.min(), gray.max()
    gray = (gray - lo) / (hi - lo) if hi > lo else np.zeros_like(gray)
    colors = {1: (255, 64, 64), 2: (255, 220, 64)}
    out_dir.mkdir(parents=True, exist_ok=True)
    for c in range(gray.shape[2]):
        rgb = np.repeat((gray[:, :, c] * 255).astype(np.uint8)[..., None], 3, axis=2)
        slice_labels = labels[:, :, c]
        edge = _mask_boundary(slice_labels)
        for cls, color in colors.items():
            sel = edge & (slice_labels == cls)
            rgb[sel] = color
        Image.fromarray(rgb).save(out_dir / f"slice_{c:03d}.png")


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    centroid_model = load_model(args.gland_model) if args.gland_model else None
    cases = ingest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = predict(model, cases, workers=args.workers,
                      centroid_model=centroid_model)
    failures = 0
    for case, result in zip(cases, results):
        if result.error:
            failures += 1
            print(f"{case.id}: ERROR {result.error}", file=sys.stderr)
            continue
        write_raw(out / f"{case.id}_mask.raw", result.labels.astype(np.float32),
                  case.image.spacing)
        if args.emit_soft:
            write_raw(out / f"{case.id}_soft.raw", result.soft.data,
                      case.image.spacing)
        if args.emit_overlays:
            _write_overlays(out / case.id, case, result.labels)
        print(f"{case.id}: wrote mask {result.labels.shape}")
    return 1 if failures else 0


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    cases = ingest(args.data)
    report = evaluate(model, cases, workers=args.workers)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2))
    for cls, (mean, std) in enumerate(zip(report.mean_dsc, report.std_dsc), start=1):
        print(f"class {cls}: DSC {mean:.4f} (+/- {std:.4f})")
    print(f"parameters: {report.n_parameters}  flops: {report.flops:,}")
    print(f"report written to {args.report}")
    return 0


def _cmd_phantoms(args) -> int:
    cases = make_phantoms(args.n, seed=args.seed, shape=args.shape,
                          n_classes=args.classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        write_raw(out / f"{case.id}.raw", case.image.data[..., 0],
                  case.image.spacing)
        write_raw(out / f"{case.id}_mask.raw", case.mask.astype(np.float32),
                  case.image.spacing)
    print(f"wrote {len(cases)} phantoms to {out}")
    return 0


def _cmd_inspect(args) -> int:
    model = load_model(args.model)
    params = param_breakdown(model)
    flops = flop_breakdown(model, (128, 128, 32))
    print(f"task: {model.task}  classes: {model.n_classes}  seed: {model.config.seed}")
    print(f"parameters: {params['total']} (saab {params['saab']}, trees {params['trees']})")
    print("flops @128x128x32: " + ", ".join(f"{k}={v:,}" for k, v in flops.items()))
    print("energy tree:")
    for hop in model.encoder.hops:
        kept = sum(len(c) for c in hop.component_indices)
        print(f"  hop {hop.hop}: {hop.n_parents} parents -> {kept} children")
        for node in hop.nodes:
            tag = "DC" if node.component_index == 0 else f"AC{node.component_index}"
            print(f"    parent {node.parent_channel:3d} {tag:>5}  "
                  f"energy {node.energy:.6f}")
    for stage in model.decoder.stages:
        n_trees = sum(len(r) for r in stage.main.trees)
        print(f"  decoder hop {stage.hop}: main {n_trees} trees, "
              f"{len(stage.refiners)} refinement stages")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hopseg",
        description="Feed-forward 3D MRI segmentation (train/predict/eval).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on a directory of cases")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="segment a directory of cases")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-overlays", action="store_true")
    p.add_argument("--emit-soft", action="store_true")
    p.add_argument("--gland-model", help="gland model for zonal crop centroids")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="evaluate DSC against ground-truth masks")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON report")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("phantoms", help="generate synthetic fixture cases")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", type=_parse_shape, default=(64, 64, 16))
    p.add_argument("--classes", type=int, choices=(2, 3), default=2)
    p.set_defaults(func=_cmd_phantoms)

    p = sub.add_parser("inspect", help="print model size, flops and energy tree")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
