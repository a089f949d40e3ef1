"""Siamese correlation tracker.

Frame 1 trains the feature-selection heads, picks the channel subsets and
freezes the composed target template. Every later frame crops a search region
around the previous box, composes the same channel subsets, and correlates a
three-scale pyramid of the search feature map against the fixed template. The
template is never updated.

Geometry: the target is mapped to a fixed feature extent (f_h, f_w) cells by
resizing the search crop, so the search patch is always (8 * S_h, 8 * S_w)
pixels with S = round(search_factor * f). One feature cell therefore always
corresponds to target_size / (8 * f) frame pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneModel, forward_taps
from .target_aware import (
    ChannelSelection,
    ImportanceVector,
    RankHead,
    RidgeHead,
    build_rank_pairs,
    channel_importance,
    combined_importance,
    compose_features,
    composition_divisors,
    default_label_sigma,
    gaussian_label,
    rank_feature_grad,
    select_channels,
    train_rank_head,
    train_ridge_head,
)
from .tensor import Tensor3, cross_correlate, resize_bilinear

ABLATION_MODES = ("rand", "regress", "regress_rank")
STRIDE = 8


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner plus extents, 0-indexed pixel coords."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + (self.w - 1) / 2.0, self.y + (self.h - 1) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class TrackerConfig:
    k_conv43: int = 250
    k_conv41: int = 80
    search_factor: float = 3.0
    # candidate multipliers applied to the previous target size, ascending
    scale_factors: tuple[float, float, float] = (45 / 47, 1.0, 45 / 43)
    scale_penalties: tuple[float, float, float] = (0.990, 1.0, 1.005)
    template_feat_min: int = 4
    template_feat_max: int = 16
    # strength of the raised-cosine motion prior on the response map; 0 is off
    window_influence: float = 0.15
    ridge_lambda: float = 1e-4
    ridge_lr: float | None = None  # None: auto step size from the data scale
    rank_lr: float | None = None
    loss_threshold: float = 0.02
    max_iters: int = 50
    rank_scales: tuple[float, ...] = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3)
    ablation: str = "regress_rank"
    abs_importance: bool = False
    seed: int | None = None

    def __post_init__(self):
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation!r}")
        if self.ablation == "rand" and self.seed is None:
            raise ValueError("ablation mode 'rand' requires a seed")
        if not all(a < b for a, b in zip(self.scale_factors, self.scale_factors[1:])):
            raise ValueError(f"scale factors must be strictly increasing: {self.scale_factors}")
        if any(p <= 0 for p in self.scale_penalties):
            raise ValueError(f"penalties must be positive: {self.scale_penalties}")
        if not 1 <= self.template_feat_min <= self.template_feat_max:
            raise ValueError("bad template feature bounds")
        if not 0 <= self.window_influence < 1:
            raise ValueError(f"window_influence must be in [0, 1): {self.window_influence}")


@dataclass
class TrackState:
    model: BackboneModel
    config: TrackerConfig
    template: Tensor3  # composed target-aware features, target extent
    sel_43: ChannelSelection
    sel_41: ChannelSelection
    feat_h: int  # target extent in feature cells
    feat_w: int
    cells_h: int  # search patch extent in feature cells
    cells_w: int
    bbox: BBox


@dataclass
class InitAnalysis:
    """Everything the first frame produces; init() reduces it to a TrackState."""

    taps: dict[str, Tensor3]
    importances: dict[str, ImportanceVector]
    selections: dict[str, ChannelSelection]
    template: Tensor3
    feat_h: int
    feat_w: int
    cells_h: int
    cells_w: int


def _crop_resize(frame: Tensor3, cy, cx, crop_h, crop_w, out_h, out_w) -> Tensor3:
    """Resample a centered sub-window to (out_h, out_w); out-of-frame samples
    replicate the nearest edge pixel."""
    data = frame.data.astype(np.float64)
    ys = cy + (np.arange(out_h) + 0.5 - out_h / 2.0) * (crop_h / out_h)
    xs = cx + (np.arange(out_w) + 0.5 - out_w / 2.0) * (crop_w / out_w)
    ys = np.clip(ys, 0.0, frame.height - 1.0)
    xs = np.clip(xs, 0.0, frame.width - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, frame.height - 1)
    x1 = np.minimum(x0 + 1, frame.width - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = data[:, y0][:, :, x0] * (1 - wx) + data[:, y0][:, :, x1] * wx
    bot = data[:, y1][:, :, x0] * (1 - wx) + data[:, y1][:, :, x1] * wx
    return Tensor3((top * (1 - wy) + bot * wy).astype(np.float32))


def _target_feat_extent(box: BBox, config: TrackerConfig) -> tuple[int, int]:
    """Feature cells per side after the template resize rule."""
    fh0, fw0 = box.h / STRIDE, box.w / STRIDE
    lo, hi = config.template_feat_min, config.template_feat_max
    if max(fh0, fw0) > hi:
        rho = hi / max(fh0, fw0)
    elif min(fh0, fw0) < lo:
        rho = min(lo / min(fh0, fw0), hi / max(fh0, fw0))
    else:
        rho = 1.0
    fh = max(1, round(fh0 * rho))
    fw = max(1, round(fw0 * rho))
    return fh, fw


def _search_patch(frame: Tensor3, box: BBox, feat_h, feat_w, config) -> tuple[Tensor3, int, int]:
    """Crop the search region and resize it so the target spans (feat_h, feat_w) cells."""
    cells_h = max(feat_h + 1, round(config.search_factor * feat_h))
    cells_w = max(feat_w + 1, round(config.search_factor * feat_w))
    crop_h = cells_h * box.h / feat_h
    crop_w = cells_w * box.w / feat_w
    cx, cy = box.center
    patch = _crop_resize(frame, cy, cx, crop_h, crop_w, cells_h * STRIDE, cells_w * STRIDE)
    return patch, cells_h, cells_w


def _select(importance: ImportanceVector, k: int, config: TrackerConfig) -> ChannelSelection:
    scores = np.abs(importance.scores) if config.abs_importance else importance.scores
    return select_channels(ImportanceVector(scores), k)


def _rand_selection(rng, channels: int, k: int) -> ChannelSelection:
    idx = np.sort(rng.choice(channels, size=min(k, channels), replace=False))
    return ChannelSelection(indices=idx.astype(np.int64), k=min(k, channels))


def prepare_init(
    frame: Tensor3, gt_bbox: BBox, model: BackboneModel, config: TrackerConfig
) -> InitAnalysis:
    """First-frame analysis: head training, importance scoring, selection,
    template composition."""
    if not (
        0 <= gt_bbox.x
        and 0 <= gt_bbox.y
        and gt_bbox.x + gt_bbox.w <= frame.width
        and gt_bbox.y + gt_bbox.h <= frame.height
    ):
        raise ValueError(f"box {gt_bbox} not inside frame {frame.shape}")

    feat_h, feat_w = _target_feat_extent(gt_bbox, config)
    patch, cells_h, cells_w = _search_patch(frame, gt_bbox, feat_h, feat_w, config)
    taps = forward_taps(model, patch)
    tap43, tap41 = taps["conv4_3"], taps["conv4_1"]

    # response grid of a target-sized kernel over the patch; the target sits at
    # its symmetric center
    resp_h = cells_h - feat_h + 1
    resp_w = cells_w - feat_w + 1
    sigma = default_label_sigma(feat_h, feat_w)
    label = gaussian_label(resp_h, resp_w, sigma, ((resp_h - 1) / 2.0, (resp_w - 1) / 2.0))

    head_cfg = dict(
        lam=config.ridge_lambda,
        learn_rate=config.ridge_lr,
        max_iters=config.max_iters,
        loss_threshold=config.loss_threshold,
    )
    importances: dict[str, ImportanceVector] = {}
    from .tensor import ConvKernel
    from .target_aware import regression_feature_grad

    for name, tap in (("conv4_3", tap43), ("conv4_1", tap41)):
        head = RidgeHead(kernel=ConvKernel.zeros(1, tap.channels, feat_h, feat_w), **head_cfg)
        head, _ = train_ridge_head(tap, label, head)
        importances[name] = channel_importance(regression_feature_grad(tap, head, label))

    # scale ranking on the auxiliary tap
    box_cells = ((cells_h - feat_h) / 2.0, (cells_w - feat_w) / 2.0, feat_h, feat_w)
    pair_set = build_rank_pairs(tap41, box_cells, config.rank_scales)
    rank_head = RankHead(
        kernel=ConvKernel.zeros(1, tap41.channels, feat_h, feat_w),
        learn_rate=config.rank_lr,
        max_iters=config.max_iters,
        loss_threshold=config.loss_threshold,
    )
    rank_head, _ = train_rank_head(pair_set.samples, pair_set.pairs, rank_head)
    grads = rank_feature_grad(pair_set.samples, rank_head, pair_set.pairs)
    rank_scores = np.sum([channel_importance(g).scores for g in grads], axis=0)
    importances["conv4_1_rank"] = ImportanceVector(rank_scores)
    importances["conv4_1_combined"] = combined_importance(
        importances["conv4_1"], importances["conv4_1_rank"]
    )

    if config.ablation == "rand":
        rng = np.random.default_rng(config.seed)
        sel_43 = _rand_selection(rng, tap43.channels, config.k_conv43)
        sel_41 = _rand_selection(rng, tap41.channels, config.k_conv41)
    elif config.ablation == "regress":
        sel_43 = _select(importances["conv4_3"], config.k_conv43, config)
        sel_41 = _select(importances["conv4_1"], config.k_conv41, config)
    else:
        sel_43 = _select(importances["conv4_3"], config.k_conv43, config)
        sel_41 = _select(importances["conv4_1_combined"], config.k_conv41, config)

    composed = compose_features(taps, sel_43, sel_41)
    r0 = round((cells_h - feat_h) / 2.0)
    c0 = round((cells_w - feat_w) / 2.0)
    template = Tensor3(composed.data[:, r0 : r0 + feat_h, c0 : c0 + feat_w])
    return InitAnalysis(
        taps=taps,
        importances=importances,
        selections={"conv4_3": sel_43, "conv4_1": sel_41},
        template=template,
        feat_h=feat_h,
        feat_w=feat_w,
        cells_h=cells_h,
        cells_w=cells_w,
    )


def init(frame: Tensor3, gt_bbox: BBox, model: BackboneModel, config: TrackerConfig) -> TrackState:
    """Build the tracking state from the first frame and its ground-truth box."""
    analysis = prepare_init(frame, gt_bbox, model, config)
    return TrackState(
        model=model,
        config=config,
        template=analysis.template,
        sel_43=analysis.selections["conv4_3"],
        sel_41=analysis.selections["conv4_1"],
        feat_h=analysis.feat_h,
        feat_w=analysis.feat_w,
        cells_h=analysis.cells_h,
        cells_w=analysis.cells_w,
        bbox=gt_bbox,
    )


def _motion_window(h: int, w: int, influence: float) -> np.ndarray:
    """Raised-cosine prior centered on the previous position: 1 at the center,
    fading to (1 - influence) at the response borders."""
    hann_h = 0.5 * (1.0 + np.cos(np.linspace(-np.pi, np.pi, h))) if h > 1 else np.ones(1)
    hann_w = 0.5 * (1.0 + np.cos(np.linspace(-np.pi, np.pi, w))) if w > 1 else np.ones(1)
    return (1.0 - influence) + influence * np.outer(hann_h, hann_w)


def pick_scale(peaks, penalties) -> int:
    """Index of the winning pyramid level: highest penalty-weighted peak.

    The penalties multiply the raw peaks, so scaling all of them by one
    positive constant never changes the argmax; with exactly equal raw peaks
    the level carrying the largest penalty wins.
    """
    scores = np.asarray(peaks, dtype=np.float64) * np.asarray(penalties, dtype=np.float64)
    return int(np.argmax(scores))


def track_frame(state: TrackState, frame: Tensor3) -> BBox:
    """Localize the target in one frame and update the state's box."""
    cfg = state.config
    box = state.bbox
    cells_h, cells_w = state.cells_h, state.cells_w
    cx, cy = box.center

    # scale pyramid: each candidate size multiplier s gets its own search crop
    # (s times the base extent) resampled to the fixed patch geometry, so the
    # object is rendered smaller / unchanged / larger against the one template
    level_taps = []
    for s in cfg.scale_factors:
        crop_h = cells_h * box.h * s / state.feat_h
        crop_w = cells_w * box.w * s / state.feat_w
        patch = _crop_resize(frame, cy, cx, crop_h, crop_w, cells_h * STRIDE, cells_w * STRIDE)
        level_taps.append(forward_taps(state.model, patch))
    # shared rescaling divisors (from the unchanged-scale level) keep the
    # level peaks comparable
    mid = len(cfg.scale_factors) // 2
    divisors = composition_divisors(level_taps[mid], state.sel_43, state.sel_41)
    levels = []
    window = None
    for taps in level_taps:
        search = compose_features(taps, state.sel_43, state.sel_41, divisors=divisors)
        resp = cross_correlate(search, state.template)
        if window is None:
            window = _motion_window(resp.height, resp.width, cfg.window_influence)
        levels.append(Tensor3((resp.data[0] * window)[np.newaxis].astype(np.float32)))
    win = pick_scale([float(lv.data.max()) for lv in levels], cfg.scale_penalties)
    s_win = cfg.scale_factors[win]
    resp = levels[win]

    # upsample by the feature stride before the argmax
    up = resize_bilinear(
        resp, (resp.height - 1) * STRIDE + 1, (resp.width - 1) * STRIDE + 1
    )
    peak_idx = np.unravel_index(int(np.argmax(up.data[0])), up.data[0].shape)
    dr = peak_idx[0] / STRIDE - (resp.height - 1) / 2.0
    dc = peak_idx[1] / STRIDE - (resp.width - 1) / 2.0
    # displacement: winning-level cells -> frame pixels (one cell spans
    # s * box_extent / feat_extent pixels in that level's crop)
    dy = dr * box.h * s_win / state.feat_h
    dx = dc * box.w * s_win / state.feat_w

    new_w = box.w * s_win
    new_h = box.h * s_win
    ncx = min(max(cx + dx, 0.0), frame.width - 1.0)
    ncy = min(max(cy + dy, 0.0), frame.height - 1.0)
    new_box = BBox(ncx - (new_w - 1) / 2.0, ncy - (new_h - 1) / 2.0, new_w, new_h)
    state.bbox = new_box
    return new_box


def track_sequence(model: BackboneModel, config: TrackerConfig, frames, init_box: BBox):
    """Track through an iterable of frames; yields one BBox per frame, the
    first being the given box."""
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("empty frame sequence") from None
    state = init(first, init_box, model, config)
    boxes = [init_box]
    for frame in it:
        boxes.append(track_frame(state, frame))
    return boxes
