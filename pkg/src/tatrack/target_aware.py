"""First-frame feature selection: trains small prediction heads on the features,
back-propagates their losses, and scores every backbone channel by the pooled
gradient so the most target-relevant channels can be kept.

Two heads are used. A ridge head regresses the feature patch to a Gaussian
score map and yields "target-active" channels; a rank head orders fixed-size
crops by how close their scale is to the ground truth and yields
"scale-sensitive" channels. Both heads are single conv layers with a zero,
untrained bias.

Sign convention: the regression feature gradient is the descent direction of
the squared-residual term (i.e. the gradient of its negation). That makes
channels that help fit the score map come out with positive pooled scores, so
top-k selection keeps the useful ones. The ranking feature gradient is the
plain analytic gradient of the pairwise soft ranking loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    ConvKernel,
    ShapeError,
    Tensor3,
    conv2d_input_grad,
    conv2d_valid,
    conv2d_weight_grad,
    global_avg_pool,
    resize_bilinear,
)

DEFAULT_LOSS_THRESHOLD = 0.02
DEFAULT_MAX_ITERS = 50
DEFAULT_RIDGE_LAMBDA = 1e-4
DEFAULT_RANK_SCALES = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3)


@dataclass(frozen=True)
class GaussianLabel:
    map: Tensor3  # single channel
    sigma: float
    center: tuple[float, float]  # (row, col) in feature cells


@dataclass(frozen=True)
class RidgeHead:
    kernel: ConvKernel  # 1 output channel, zero bias
    lam: float = DEFAULT_RIDGE_LAMBDA
    learn_rate: float | None = None  # None: auto step from the data scale
    max_iters: int = DEFAULT_MAX_ITERS
    loss_threshold: float = DEFAULT_LOSS_THRESHOLD


@dataclass(frozen=True)
class RankHead:
    kernel: ConvKernel  # 1 output channel, spatial size = sample size, zero bias
    learn_rate: float | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    loss_threshold: float = DEFAULT_LOSS_THRESHOLD


@dataclass(frozen=True)
class RankPairSet:
    samples: list[Tensor3]  # one fixed-size feature crop per scale
    pairs: list[tuple[int, int]]  # (i, j): sample j strictly closer to gt size
    scales: tuple[float, ...]


@dataclass(frozen=True)
class ImportanceVector:
    scores: np.ndarray  # one score per input channel

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise ValueError("importance scores contain non-finite values")
        object.__setattr__(self, "scores", scores)


@dataclass(frozen=True)
class ChannelSelection:
    indices: np.ndarray  # strictly increasing
    k: int


def gaussian_label(h: int, w: int, sigma: float, center: tuple[float, float]) -> GaussianLabel:
    """Gaussian score map exp(-(dr^2 + dc^2) / (2 sigma^2)) over an h x w grid."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cr, cc = center
    if not (0 <= cr < h and 0 <= cc < w):
        raise ValueError(f"center {center} outside {h}x{w} map")
    rows = (np.arange(h, dtype=np.float64) - cr) ** 2
    cols = (np.arange(w, dtype=np.float64) - cc) ** 2
    grid = np.exp(-(rows[:, None] + cols[None, :]) / (2.0 * sigma * sigma))
    return GaussianLabel(Tensor3(grid[np.newaxis].astype(np.float32)), float(sigma), (cr, cc))


def default_label_sigma(feat_h: int, feat_w: int) -> float:
    """Score-map kernel width proportional to the target's feature extent."""
    return max(0.5, 0.1 * math.sqrt(feat_h * feat_w))


# ---------------------------------------------------------------------------
# Shared descent loop

_BACKTRACK_LIMIT = 25
_STEP_GROWTH = 1.2


def _descend(w0: np.ndarray, loss_fn, grad_fn, lr0: float, max_iters: int, threshold: float):
    """Plain gradient descent with multiplicative step adaptation.

    A step that raises the loss is rejected and retried at half the step size,
    so the accepted-loss sequence never increases; accepted steps grow the
    step size slightly to recover from an overly cautious start.
    """
    w = w0.astype(np.float64)
    loss = loss_fn(w)
    lr = lr0
    for _ in range(max_iters):
        if loss <= threshold:
            break
        g = grad_fn(w)
        accepted = False
        for _ in range(_BACKTRACK_LIMIT):
            cand = w - lr * g
            cand_loss = loss_fn(cand)
            if cand_loss <= loss:
                w, loss = cand, cand_loss
                lr *= _STEP_GROWTH
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break  # step size underflowed; already at numerical floor
    return w, float(loss)


# ---------------------------------------------------------------------------
# Regression (ridge) head


def _ridge_response(features: Tensor3, weights: np.ndarray) -> np.ndarray:
    k = ConvKernel(weights.astype(np.float32))
    return conv2d_valid(features, k).data[0].astype(np.float64)


def _ridge_loss(features: Tensor3, weights: np.ndarray, label: np.ndarray, lam: float) -> float:
    resid = label - _ridge_response(features, weights)
    return float((resid**2).sum() + lam * (weights.astype(np.float64) ** 2).sum())


def train_ridge_head(
    features: Tensor3, label: GaussianLabel, head: RidgeHead
) -> tuple[RidgeHead, float]:
    """Fit the ridge head to the Gaussian score map by gradient descent.

    Stops at head.loss_threshold or after head.max_iters accepted/rejected
    iterations; returns the head with updated weights and the final loss
    (squared residual sum plus the weighted squared weight norm).
    """
    kernel = head.kernel
    if kernel.out_channels != 1:
        raise ShapeError(f"ridge head kernel must have 1 output channel, got {kernel.weights.shape}")
    resp_shape = (
        features.height - kernel.kernel_h + 1,
        features.width - kernel.kernel_w + 1,
    )
    if label.map.data.shape[1:] != resp_shape:
        raise ShapeError(
            f"label map {label.map.shape} does not match response shape (1, {resp_shape[0]}, {resp_shape[1]})"
        )
    y = label.map.data[0].astype(np.float64)
    lam = head.lam

    def loss_fn(w):
        return _ridge_loss(features, w, y, lam)

    def grad_fn(w):
        resid = y - _ridge_response(features, w)
        resid_t = Tensor3(resid[np.newaxis].astype(np.float32))
        wgrad, _ = conv2d_weight_grad(features, resid_t)
        return -2.0 * wgrad.astype(np.float64) + 2.0 * lam * w

    lr0 = head.learn_rate
    if lr0 is None:
        # conservative inverse-Lipschitz estimate from the window energy
        energy = float((features.data.astype(np.float64) ** 2).sum())
        lr0 = 1.0 / (2.0 * (energy * kernel.kernel_h * kernel.kernel_w + lam) + 1e-12)
    w, loss = _descend(
        kernel.weights, loss_fn, grad_fn, lr0, head.max_iters, head.loss_threshold
    )
    trained = ConvKernel(w.astype(np.float32))
    return replace(head, kernel=trained), loss


def regression_feature_grad(
    features: Tensor3, head: RidgeHead, label: GaussianLabel
) -> Tensor3:
    """Descent direction of the squared-residual term w.r.t. the input features.

    Back-propagates the residual map 2(Y - response) through the head kernel;
    the regularizer does not touch the features.
    """
    resp = conv2d_valid(features, head.kernel)
    if resp.data.shape != label.map.data.shape:
        raise ShapeError(f"response {resp.shape} does not match label {label.map.shape}")
    resid = 2.0 * (label.map.data[0].astype(np.float64) - resp.data[0].astype(np.float64))
    return conv2d_input_grad(Tensor3(resid[np.newaxis].astype(np.float32)), head.kernel)


# ---------------------------------------------------------------------------
# Ranking head


def build_rank_pairs(
    feature_patch: Tensor3,
    gt_box: tuple[float, float, float, float],
    scale_set=DEFAULT_RANK_SCALES,
) -> RankPairSet:
    """Cut one crop per scale around the box and order them by size closeness.

    gt_box is (top, left, height, width) in feature cells; scale 1 is the
    ground-truth size. Closeness is |log scale|; exact ties yield no pair.
    Every crop is resized back to the ground-truth cell extent.
    """
    scales = tuple(float(s) for s in scale_set)
    if len(set(scales)) < 2:
        raise ValueError("need at least two distinct scales")
    top, left, box_h, box_w = (float(v) for v in gt_box)
    if box_h <= 0 or box_w <= 0:
        raise ValueError(f"degenerate box {gt_box}")
    if top < 0 or left < 0 or top + box_h > feature_patch.height or left + box_w > feature_patch.width:
        raise ValueError(f"box {gt_box} outside patch {feature_patch.shape}")
    cy, cx = top + box_h / 2.0, left + box_w / 2.0
    out_h, out_w = max(1, round(box_h)), max(1, round(box_w))

    samples = []
    for s in scales:
        ch = min(feature_patch.height, max(1, round(box_h * s)))
        cw = min(feature_patch.width, max(1, round(box_w * s)))
        r0 = int(round(cy - ch / 2.0))
        c0 = int(round(cx - cw / 2.0))
        r0 = min(max(r0, 0), feature_patch.height - ch)
        c0 = min(max(c0, 0), feature_patch.width - cw)
        crop = Tensor3(feature_patch.data[:, r0 : r0 + ch, c0 : c0 + cw])
        samples.append(resize_bilinear(crop, out_h, out_w))

    # |log s| distance to the ground-truth scale; near-equal distances (e.g.
    # 0.8 vs 1.25) count as ties and produce no pair
    dist = [abs(math.log(s)) for s in scales]
    pairs = [
        (i, j)
        for i in range(len(scales))
        for j in range(len(scales))
        if dist[j] < dist[i] - 1e-9
    ]
    if not pairs:
        raise ValueError(f"no valid ranking pairs from scales {scales}")
    return RankPairSet(samples=samples, pairs=pairs, scales=scales)


def rank_loss(predictions, pairs) -> float:
    """log(1 + sum over pairs of exp(f_i - f_j)), overflow-safe."""
    if not pairs:
        raise ValueError("empty pair set")
    preds = np.asarray(predictions, dtype=np.float64)
    margins = np.array([preds[i] - preds[j] for i, j in pairs])
    peak = max(0.0, margins.max())
    return float(peak + np.log(np.exp(-peak) + np.exp(margins - peak).sum()))


def _rank_pred_grad(predictions, pairs) -> np.ndarray:
    """d(rank_loss)/d(prediction_k), overflow-safe softmax-style weights."""
    preds = np.asarray(predictions, dtype=np.float64)
    margins = np.array([preds[i] - preds[j] for i, j in pairs])
    peak = max(0.0, margins.max())
    weights = np.exp(margins - peak)
    denom = np.exp(-peak) + weights.sum()
    grad = np.zeros(len(preds))
    for (i, j), w in zip(pairs, weights):
        grad[i] += w / denom
        grad[j] -= w / denom
    return grad


def _head_predictions(samples, kernel: ConvKernel) -> np.ndarray:
    return np.array([float(conv2d_valid(s, kernel).data[0, 0, 0]) for s in samples])


def rank_feature_grad(samples, head: RankHead, pairs) -> list[Tensor3]:
    """Analytic ranking-loss gradient w.r.t. each sample's features.

    Each sample's scalar-prediction gradient is pushed back through the head
    kernel; callers sum the per-sample maps channel-wise for importance
    scoring.
    """
    if not pairs:
        raise ValueError("empty pair set")
    preds = _head_predictions(samples, head.kernel)
    pred_grad = _rank_pred_grad(preds, pairs)
    grads = []
    for g in pred_grad:
        gmap = Tensor3(np.full((1, 1, 1), g, dtype=np.float32))
        grads.append(conv2d_input_grad(gmap, head.kernel))
    return grads


def train_rank_head(samples, pairs, head: RankHead) -> tuple[RankHead, float]:
    """Fit the rank head so closer-sized samples score higher."""
    if not samples:
        raise ValueError("no ranking samples")
    if not pairs:
        raise ValueError("empty pair set")
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"rank samples disagree in shape: {sorted(shapes)}")
    kernel = head.kernel
    if kernel.weights.shape[1:] != samples[0].shape:
        raise ShapeError(
            f"head kernel {kernel.weights.shape} does not cover samples {samples[0].shape}"
        )
    stack = np.stack([s.data.astype(np.float64) for s in samples])

    def loss_fn(w):
        preds = (stack * w).sum(axis=(1, 2, 3))
        return rank_loss(preds, pairs)

    def grad_fn(w):
        preds = (stack * w).sum(axis=(1, 2, 3))
        pg = _rank_pred_grad(preds, pairs)
        return np.tensordot(pg, stack, axes=1)

    lr0 = head.learn_rate
    if lr0 is None:
        lr0 = 1.0 / (float((stack**2).sum(axis=(1, 2, 3)).max()) * len(pairs) + 1e-12)
    w0 = kernel.weights[0]  # optimize the single output channel
    w, loss = _descend(w0, loss_fn, grad_fn, lr0, head.max_iters, head.loss_threshold)
    trained = ConvKernel(w[np.newaxis].astype(np.float32))
    return replace(head, kernel=trained), loss


# ---------------------------------------------------------------------------
# Importance scoring and channel selection


def channel_importance(feature_grad: Tensor3) -> ImportanceVector:
    """Per-channel global average pool of a feature gradient."""
    return ImportanceVector(global_avg_pool(feature_grad))


def select_channels(importance: ImportanceVector, k: int) -> ChannelSelection:
    """Indices of the k largest scores, ascending; ties prefer lower indices."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    scores = importance.scores
    k_eff = min(k, scores.size)
    order = np.lexsort((np.arange(scores.size), -scores))
    picked = np.sort(order[:k_eff])
    return ChannelSelection(indices=picked.astype(np.int64), k=k_eff)


def combined_importance(reg: ImportanceVector, rank: ImportanceVector) -> ImportanceVector:
    """Sum of the two score vectors, each normalized by its own max |score|."""
    if reg.scores.size != rank.scores.size:
        raise ShapeError(
            f"importance lengths differ: {reg.scores.size} vs {rank.scores.size}"
        )

    def normalized(v):
        peak = np.abs(v).max()
        return v / peak if peak > 0 else v

    return ImportanceVector(normalized(reg.scores) + normalized(rank.scores))


def _aligned_groups(taps, sel_43, sel_41, tap_main, tap_aux):
    if sel_43.indices.size == 0 or sel_41.indices.size == 0:
        raise ValueError("empty channel selection")
    main = taps[tap_main]
    aux = taps[tap_aux]
    if aux.data.shape[1:] != main.data.shape[1:]:
        aux = resize_bilinear(aux, main.height, main.width)
    return main.data[sel_43.indices], aux.data[sel_41.indices]


def composition_divisors(
    taps: dict[str, Tensor3],
    sel_43: ChannelSelection,
    sel_41: ChannelSelection,
    tap_main: str = "conv4_3",
    tap_aux: str = "conv4_1",
) -> tuple[float, float]:
    """Per-group rescaling divisors: the largest per-channel value sum in each
    selected group, or 1 when that maximum is not positive."""
    groups = _aligned_groups(taps, sel_43, sel_41, tap_main, tap_aux)
    out = []
    for g in groups:
        peak = float(g.astype(np.float64).sum(axis=(1, 2)).max())
        out.append(peak if peak > 0 else 1.0)
    return tuple(out)


def compose_features(
    taps: dict[str, Tensor3],
    sel_43: ChannelSelection,
    sel_41: ChannelSelection,
    tap_main: str = "conv4_3",
    tap_aux: str = "conv4_1",
    divisors: tuple[float, float] | None = None,
) -> Tensor3:
    """Stack the selected channels from both taps into one tensor.

    Each tap's channel group is divided by the largest per-channel value sum
    within the group (left unscaled when that maximum is not positive); the
    auxiliary tap is resized to the main tap's spatial size first. Callers
    comparing several composed maps can pass shared divisors so the maps stay
    on one scale.
    """
    main, aux = _aligned_groups(taps, sel_43, sel_41, tap_main, tap_aux)
    if divisors is None:
        divisors = composition_divisors(taps, sel_43, sel_41, tap_main, tap_aux)
    stacked = np.concatenate(
        [main.astype(np.float64) / divisors[0], aux.astype(np.float64) / divisors[1]]
    )
    return Tensor3(stacked.astype(np.float32))


def importance_json(per_tap: dict[str, tuple[ImportanceVector, ChannelSelection]]) -> dict:
    """Dump structure for the importance report: per-tap channel/score/selected."""
    out = {}
    for tap, (imp, sel) in per_tap.items():
        chosen = set(int(i) for i in sel.indices)
        out[tap] = [
            {"channel": i, "score": float(s), "selected": i in chosen}
            for i, s in enumerate(imp.scores)
        ]
    return out
