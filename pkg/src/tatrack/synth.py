"""Seeded synthetic sequences with exact ground truth, OTB directory layout.

Three kinds: a textured square drifting over a mildly textured background
(translate), the same square growing steadily every frame (zoom), and a
drift over strongly structured background noise (clutter). All randomness
comes from one seeded generator, so a (kind, seed, frames) triple is
reproducible down to the file bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor3, resize_bilinear
from .tracker import BBox

KINDS = ("translate", "zoom", "clutter")

# Per-frame zoom growth. Chosen so a correct tracker must answer with its
# scale-up step (about 4.7% under the default pyramid) in most frames.
ZOOM_GROWTH = 1.04


def _smooth_noise(rng, h, w, grid=12, lo=40.0, hi=200.0):
    """Low-frequency color field: a coarse random grid upsampled bilinearly."""
    coarse = rng.uniform(lo, hi, (3, grid, grid)).astype(np.float32)
    return resize_bilinear(Tensor3(coarse), h, w).data.copy()


def _background(kind: str, rng, h, w) -> np.ndarray:
    bg = _smooth_noise(rng, h, w)
    if kind == "clutter":
        # structured noise: a mid-frequency block field plus stripes, strong
        # enough to put real texture energy everywhere without occluding
        blocks = _smooth_noise(rng, h, w, grid=40, lo=-70.0, hi=70.0)
        stripe = (np.sin(np.arange(w) / 5.0) * 30.0).astype(np.float32)
        bg = bg * 0.6 + blocks + stripe[None, None, :] + 70.0
    bg += rng.normal(0.0, 6.0, bg.shape).astype(np.float32)
    return np.clip(bg, 0, 255)


def _target_texture(rng, base=48, block=6) -> Tensor3:
    """High-contrast block texture; scaled per frame to the current extent."""
    cells = max(2, base // block)
    tex = rng.uniform(0, 255, (3, cells, cells)).astype(np.float32)
    return resize_bilinear(Tensor3(tex), base, base)


def make_sequence(
    kind: str,
    frames: int,
    seed: int,
    height: int = 240,
    width: int = 320,
    target_size: int = 48,
    zoom_growth: float = ZOOM_GROWTH,
) -> tuple[list[Tensor3], list[BBox]]:
    """Render the sequence in memory; returns (frames, ground-truth boxes)."""
    if kind not in KINDS:
        raise ValueError(f"unknown sequence kind {kind!r}; expected one of {KINDS}")
    if frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    bg = _background(kind, rng, height, width)
    if kind == "zoom":
        # start small enough that the grown square still fits the frame
        target_size = min(target_size, 40)
    texture = _target_texture(rng, base=target_size)

    cx, cy = width / 2.0, height / 2.0
    vx, vy = (float(rng.uniform(2.0, 4.0)) * (1 if rng.random() < 0.5 else -1) for _ in range(2))

    imgs, boxes = [], []
    size = float(target_size)
    for t in range(frames):
        cur = max(8, round(size))
        margin = cur // 2 + 2
        if kind != "zoom":
            cx += vx
            cy += vy
            if not margin <= cx <= width - margin:
                vx = -vx
                cx += 2 * vx
            if not margin <= cy <= height - margin:
                vy = -vy
                cy += 2 * vy
        x0 = int(round(cx)) - cur // 2
        y0 = int(round(cy)) - cur // 2
        x0 = min(max(x0, 0), width - cur)
        y0 = min(max(y0, 0), height - cur)

        frame = bg.copy()
        patch = resize_bilinear(texture, cur, cur).data
        frame[:, y0 : y0 + cur, x0 : x0 + cur] = patch
        imgs.append(Tensor3(np.clip(frame, 0, 255)))
        boxes.append(BBox(float(x0), float(y0), float(cur), float(cur)))
        if kind == "zoom":
            size *= zoom_growth
    return imgs, boxes


def save_frame_png(frame: Tensor3, path) -> None:
    arr = np.clip(np.round(frame.data), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def write_sequence(out_dir, imgs, boxes) -> None:
    """Emit OTB layout: img/0001.png ... plus a 1-indexed groundtruth_rect.txt."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(imgs, start=1):
        save_frame_png(frame, img_dir / f"{i:04d}.png")
    lines = [
        f"{int(b.x) + 1},{int(b.y) + 1},{int(b.w)},{int(b.h)}" for b in boxes
    ]
    (out_dir / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
