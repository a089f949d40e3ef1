"""Command-line entry points: track, eval, importance, synth, render.

Exit codes: 0 ok, 2 usage error, 3 I/O error, 4 shape/validation error.
Configuration precedence per field: command-line flag, then config file
(flat key=value lines), then built-in default.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .backbone import WeightFileError, forward_taps, load_weights
from .evaluation import (
    load_frame,
    load_sequence,
    read_rect_file,
    run_benchmark,
    run_sequence,
    write_rect_file,
    write_report,
)
from .synth import KINDS, make_sequence, save_frame_png, write_sequence
from .target_aware import importance_json
from .tensor import ShapeError
from .tracker import BBox, TrackerConfig, prepare_init

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4

_TUPLE_FIELDS = {"scale_factors", "scale_penalties", "rank_scales"}
_CONFIG_FIELD_TYPES = {f.name: f.type for f in fields(TrackerConfig)}


def _parse_value(name: str, raw: str):
    if name not in _CONFIG_FIELD_TYPES:
        raise ValueError(f"unknown config key {name!r}")
    if name in _TUPLE_FIELDS:
        return tuple(float(v) for v in raw.split(","))
    if name == "ablation":
        return raw.strip()
    if name == "abs_importance":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if name in ("k_conv43", "k_conv41", "template_feat_min", "template_feat_max", "max_iters", "seed"):
        return int(raw)
    return float(raw)


def read_config_file(path) -> dict:
    """Flat key=value config; blank lines and # comments are skipped."""
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        overrides[key.strip()] = _parse_value(key.strip(), raw.strip())
    return overrides


def build_config(args) -> TrackerConfig:
    """Merge defaults <- config file <- explicit command-line flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _CONFIG_FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrackerConfig(**values)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--k-conv43", dest="k_conv43", type=int)
    p.add_argument("--k-conv41", dest="k_conv41", type=int)
    p.add_argument("--search-factor", dest="search_factor", type=float)
    p.add_argument("--scale-factors", dest="scale_factors", type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--scale-penalties", dest="scale_penalties", type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--template-feat-min", dest="template_feat_min", type=int)
    p.add_argument("--template-feat-max", dest="template_feat_max", type=int)
    p.add_argument("--window-influence", dest="window_influence", type=float)
    p.add_argument("--ridge-lambda", dest="ridge_lambda", type=float)
    p.add_argument("--ridge-lr", dest="ridge_lr", type=float)
    p.add_argument("--rank-lr", dest="rank_lr", type=float)
    p.add_argument("--loss-threshold", dest="loss_threshold", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--rank-scales", dest="rank_scales", type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--ablation", choices=("rand", "regress", "regress_rank"))
    p.add_argument("--abs-importance", dest="abs_importance", action="store_const", const=True)
    p.add_argument("--seed", type=int)


def _frames_of(seq):
    for p in seq.frame_paths:
        yield load_frame(p)


def cmd_track(args) -> int:
    seq = load_sequence(args.sequence)
    model = load_weights(args.weights)
    config = build_config(args)
    boxes, fps = run_sequence(model, config, seq)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rect_file(out, boxes)
    out.with_suffix(out.suffix + ".fps.txt").write_text(f"{fps:.3f}\n")
    print(f"{seq.name}: {len(boxes)} frames, {fps:.2f} fps -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = Path(args.dataset)
    if not dataset.is_dir():
        raise FileNotFoundError(f"dataset directory {dataset} does not exist")
    seq_dirs = sorted(d for d in dataset.iterdir() if d.is_dir())
    if not seq_dirs:
        raise FileNotFoundError(f"dataset directory {dataset} has no sequences")
    model = load_weights(args.weights)
    config = build_config(args)
    report = run_benchmark(model, config, seq_dirs, jobs=args.jobs)
    write_report(report, args.out)
    ran = len(report["sequences"])
    agg = report.get("aggregate", {})
    print(
        f"evaluated {ran} sequences ({len(report['skipped'])} skipped), "
        f"AUC {agg.get('auc', float('nan')):.3f} -> {args.out}"
    )
    return EXIT_OK


def _parse_bbox(raw: str) -> BBox:
    parts = [float(v) for v in raw.split(",")]
    if len(parts) != 4:
        raise ValueError(f"--bbox expects x,y,w,h, got {raw!r}")
    x, y, w, h = parts
    return BBox(x - 1.0, y - 1.0, w, h)  # flag uses the 1-indexed file convention


def cmd_importance(args) -> int:
    model = load_weights(args.weights)
    config = build_config(args)
    frame = load_frame(args.frame)
    analysis = prepare_init(frame, _parse_bbox(args.bbox), model, config)
    per_tap = {
        "conv4_3": (analysis.importances["conv4_3"], analysis.selections["conv4_3"]),
        "conv4_1": (
            analysis.importances["conv4_1_combined"]
            if config.ablation == "regress_rank"
            else analysis.importances["conv4_1"],
            analysis.selections["conv4_1"],
        ),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(importance_json(per_tap), indent=2, sort_keys=True))
    print(f"importance dump -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    imgs, boxes = make_sequence(args.kind, args.frames, seed=args.seed if args.seed is not None else 0)
    write_sequence(args.out, imgs, boxes)
    print(f"{args.kind} sequence with {len(imgs)} frames -> {args.out}")
    return EXIT_OK


def _draw_box(draw: ImageDraw.ImageDraw, box: BBox, color: str) -> None:
    draw.rectangle(
        [box.x, box.y, box.x + box.w - 1, box.y + box.h - 1], outline=color, width=2
    )


def cmd_render(args) -> int:
    seq = load_sequence(args.sequence)
    boxes = read_rect_file(args.boxes)
    if len(boxes) != len(seq.frame_paths):
        raise ShapeError(
            f"{len(boxes)} boxes for {len(seq.frame_paths)} frames in {seq.name}"
        )
    model = load_weights(args.weights) if args.featmap else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (path, box) in enumerate(zip(seq.frame_paths, boxes), start=1):
        with Image.open(path) as img:
            canvas = img.convert("RGB")
        draw = ImageDraw.Draw(canvas)
        _draw_box(draw, box, "red")
        if args.gt:
            _draw_box(draw, seq.gt_boxes[i - 1], "lime")
        canvas.save(out_dir / f"{i:04d}.png", format="PNG")
        if model is not None:
            taps = forward_taps(model, load_frame(path))
            mean_map = taps[args.featmap].data.mean(axis=0, dtype=np.float64)
            span = mean_map.max() - mean_map.min()
            norm = (mean_map - mean_map.min()) / span if span > 0 else mean_map * 0
            gray = np.round(norm * 255).astype(np.uint8)
            Image.fromarray(gray, mode="L").save(out_dir / f"featmap_{i:04d}.png")
    print(f"rendered {len(boxes)} frames -> {out_dir}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tatrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="track one sequence, write a box file")
    p.add_argument("--weights", required=True)
    p.add_argument("--sequence", required=True, help="OTB-layout sequence directory")
    p.add_argument("--out", required=True, help="output box file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="run the benchmark over a dataset directory")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("importance", help="dump per-channel importance JSON")
    p.add_argument("--weights", required=True)
    p.add_argument("--frame", required=True, help="image file")
    p.add_argument("--bbox", required=True, help="x,y,w,h (1-indexed, as in gt files)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("synth", help="generate a synthetic OTB-layout sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=KINDS, default="translate")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="burn boxes into frames")
    p.add_argument("--sequence", required=True)
    p.add_argument("--boxes", required=True, help="box file to overlay")
    p.add_argument("--out", required=True)
    p.add_argument("--gt", action="store_true", help="also draw the ground truth")
    p.add_argument("--featmap", metavar="TAP", choices=("conv4_1", "conv4_3"),
                   help="also dump channel-averaged activation images for TAP")
    p.add_argument("--weights", help="required with --featmap")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    if getattr(args, "featmap", None) and not getattr(args, "weights", None):
        print("error: --featmap requires --weights", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (WeightFileError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
