"""OTB-style benchmark runner and metrics.

Metrics follow the usual toolkit conventions: precision counts frames whose
center error is <= the threshold (51 thresholds, 0..50 px), success counts
frames whose overlap is strictly > the threshold (21 thresholds, 0..1 in
steps of 0.05), and the reported AUC is the plain mean of the success curve.
The initialization frame is included.

Sequence layout on disk: <dir>/img/0001.jpg (or .png) frames plus a
groundtruth_rect.txt of "x,y,w,h" lines (comma, tab or space separated,
1-indexed origin). Box files written here follow the same convention.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor3
from .tracker import BBox, TrackerConfig, track_sequence

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)  # pixels
SUCCESS_THRESHOLDS = np.arange(21, dtype=np.float64) * 0.05  # overlap


@dataclass(frozen=True)
class Sequence:
    name: str
    frame_paths: tuple[Path, ...]
    gt_boxes: tuple[BBox, ...]


@dataclass(frozen=True)
class EvalResult:
    cle: np.ndarray  # per-frame center location error, pixels
    iou: np.ndarray  # per-frame overlap ratio
    precision: np.ndarray  # fraction of frames with cle <= t, per threshold
    success: np.ndarray  # fraction of frames with iou > t, per threshold
    auc: float
    precision_at_20: float


def center_location_error(pred: BBox, gt: BBox) -> float:
    """Euclidean distance between box centers."""
    (px, py), (gx, gy) = pred.center, gt.center
    return float(np.hypot(px - gx, py - gy))


def overlap_ratio(pred: BBox, gt: BBox) -> float:
    """Intersection over union; disjoint boxes score 0."""
    ix = min(pred.x + pred.w, gt.x + gt.w) - max(pred.x, gt.x)
    iy = min(pred.y + pred.h, gt.y + gt.h) - max(pred.y, gt.y)
    inter = max(0.0, ix) * max(0.0, iy)
    union = pred.w * pred.h + gt.w * gt.h - inter
    return float(inter / union) if union > 0 else 0.0


def curves(cles, ious) -> EvalResult:
    """Precision/success curves plus AUC from per-frame error series."""
    cles = np.asarray(cles, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    if cles.size == 0 or cles.size != ious.size:
        raise ValueError(f"need equal non-empty series, got {cles.size} and {ious.size}")
    precision = (cles[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    success = (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return EvalResult(
        cle=cles,
        iou=ious,
        precision=precision,
        success=success,
        auc=float(success.mean()),
        precision_at_20=float(precision[20]),
    )


def evaluate_boxes(preds, gts) -> EvalResult:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    cles = [center_location_error(p, g) for p, g in zip(preds, gts)]
    ious = [overlap_ratio(p, g) for p, g in zip(preds, gts)]
    return curves(cles, ious)


# ---------------------------------------------------------------------------
# Sequence and box-file I/O (1-indexed on disk, 0-indexed in memory)


def read_rect_file(path) -> list[BBox]:
    boxes = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = [float(v) for v in re.split(r"[,\t ]+", line)]
        if len(parts) != 4:
            raise ValueError(f"{path}: expected 4 values per line, got {line!r}")
        x, y, w, h = parts
        boxes.append(BBox(x - 1.0, y - 1.0, w, h))
    return boxes


def write_rect_file(path, boxes) -> None:
    def fmt(v: float) -> str:
        return f"{v:.2f}".rstrip("0").rstrip(".")

    lines = [f"{fmt(b.x + 1.0)},{fmt(b.y + 1.0)},{fmt(b.w)},{fmt(b.h)}" for b in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def load_frame(path) -> Tensor3:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1)
    return Tensor3(arr)


def load_sequence(seq_dir) -> Sequence:
    seq_dir = Path(seq_dir)
    img_dir = seq_dir / "img"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{seq_dir} has no img/ directory")
    frame_paths = sorted(
        p for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not frame_paths:
        raise FileNotFoundError(f"{img_dir} contains no frames")
    gt_path = seq_dir / "groundtruth_rect.txt"
    if not gt_path.is_file():
        raise FileNotFoundError(f"{gt_path} missing")
    gt = read_rect_file(gt_path)
    if len(gt) != len(frame_paths):
        raise ValueError(
            f"{seq_dir.name}: {len(frame_paths)} frames but {len(gt)} ground-truth lines"
        )
    return Sequence(name=seq_dir.name, frame_paths=tuple(frame_paths), gt_boxes=tuple(gt))


# ---------------------------------------------------------------------------
# Benchmark driver


def run_sequence(model, config: TrackerConfig, seq: Sequence) -> tuple[list[BBox], float]:
    """Track one sequence; returns (boxes, fps)."""
    frames = (load_frame(p) for p in seq.frame_paths)
    start = time.perf_counter()
    boxes = track_sequence(model, config, frames, seq.gt_boxes[0])
    elapsed = max(time.perf_counter() - start, 1e-9)
    return boxes, len(seq.frame_paths) / elapsed


def run_benchmark(model, config: TrackerConfig, sequences, jobs: int = 1) -> dict:
    """Evaluate every sequence; unreadable ones are recorded as skipped.

    Returns a report dict with per-sequence results plus a frame-pooled
    aggregate, in deterministic name order.
    """
    entries = []
    skipped = []

    def one(seq_dir):
        seq = load_sequence(seq_dir)
        boxes, fps = run_sequence(model, config, seq)
        result = evaluate_boxes(boxes, list(seq.gt_boxes))
        return seq, boxes, result, fps

    seq_dirs = list(sequences)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(one, d): d for d in seq_dirs}
            for fut, d in futures.items():
                try:
                    entries.append(fut.result())
                except Exception as exc:
                    skipped.append({"sequence": str(d), "error": str(exc)})
    else:
        for d in seq_dirs:
            try:
                entries.append(one(d))
            except Exception as exc:
                skipped.append({"sequence": str(d), "error": str(exc)})

    entries.sort(key=lambda e: e[0].name)
    skipped.sort(key=lambda s: s["sequence"])

    report = {"sequences": [], "skipped": skipped}
    all_cle, all_iou = [], []
    for seq, boxes, result, fps in entries:
        all_cle.append(result.cle)
        all_iou.append(result.iou)
        report["sequences"].append(
            {
                "name": seq.name,
                "frames": len(seq.frame_paths),
                "fps": fps,
                "auc": result.auc,
                "precision_at_20": result.precision_at_20,
                "precision_curve": result.precision.tolist(),
                "success_curve": result.success.tolist(),
                "boxes": [b.as_tuple() for b in boxes],
            }
        )
    if all_cle:
        pooled = curves(np.concatenate(all_cle), np.concatenate(all_iou))
        report["aggregate"] = {
            "frames": int(sum(len(c) for c in all_cle)),
            "auc": pooled.auc,
            "precision_at_20": pooled.precision_at_20,
            "precision_curve": pooled.precision.tolist(),
            "success_curve": pooled.success.tolist(),
        }
    return report


def write_report(report: dict, out_dir) -> None:
    """Emit report.json (full curves) and summary.csv (one row per sequence)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    rows = ["name,auc,precision_at_20,fps"]
    for seq in report["sequences"]:
        rows.append(
            f"{seq['name']},{seq['auc']:.6f},{seq['precision_at_20']:.6f},{seq['fps']:.3f}"
        )
    if "aggregate" in report:
        agg = report["aggregate"]
        rows.append(f"aggregate,{agg['auc']:.6f},{agg['precision_at_20']:.6f},")
    (out_dir / "summary.csv").write_text("\n".join(rows) + "\n")
