"""Dense CHW tensors plus the conv/pool/gradient kernels the tracker is built on.

Everything is float32 storage; pooling and scoring reductions accumulate in
float64, while the convolution GEMM itself stays in float32 for speed.
Operations are pure: inputs are immutable and every call returns a fresh
tensor, so they are safe to use from multiple threads.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible. No implicit broadcasting."""


def _as_f32(data, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


class Tensor3:
    """Immutable rank-3 activation tensor, laid out (channels, height, width)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = _as_f32(data, "tensor data")
        if arr.ndim != 3:
            raise ShapeError(f"expected 3 dims (C,H,W), got shape {arr.shape}")
        self.data = arr

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Tensor3":
        return cls(np.zeros((channels, height, width), dtype=np.float32))

    @classmethod
    def full(cls, channels: int, height: int, width: int, value: float) -> "Tensor3":
        return cls(np.full((channels, height, width), value, dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor3(channels={self.channels}, height={self.height}, width={self.width})"


class ConvKernel:
    """Immutable conv weights (out, in, kh, kw) with a per-output bias."""

    __slots__ = ("weights", "bias")

    def __init__(self, weights, bias=None):
        w = _as_f32(weights, "kernel weights")
        if w.ndim != 4:
            raise ShapeError(f"expected 4 dims (out,in,kh,kw), got shape {w.shape}")
        if bias is None:
            bias = np.zeros(w.shape[0], dtype=np.float32)
        b = _as_f32(bias, "kernel bias")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match out_channels {w.shape[0]}")
        self.weights = w
        self.bias = b

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int, kh: int, kw: int) -> "ConvKernel":
        return cls(np.zeros((out_channels, in_channels, kh, kw), dtype=np.float32))

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    def __repr__(self):
        return f"ConvKernel{self.weights.shape}"


# Block size (in float32 elements) for the im2col buffers, bounds peak memory.
_IM2COL_BLOCK_ELEMS = 16_000_000


def _gemm_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation via row-blocked im2col and a float32 GEMM.

    The GEMM runs in float32 for throughput; the induced accumulation error is
    orders of magnitude below the library's stated tolerances. All other
    reductions in this module accumulate in float64.
    """
    c, h, w = x.shape
    out_c, in_c, kh, kw = weights.shape
    out_h, out_w = h - kh + 1, w - kw + 1
    wmat = weights.reshape(out_c, in_c * kh * kw)
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (C, out_h, out_w, kh, kw)
    out = np.empty((out_c, out_h, out_w), dtype=np.float32)
    block = max(1, _IM2COL_BLOCK_ELEMS // max(1, out_w * in_c * kh * kw))
    for r0 in range(0, out_h, block):
        r1 = min(r0 + block, out_h)
        # (C, kh, kw, rows, out_w) gather keeps the inner loop contiguous and
        # the GEMM output lands directly in channel-major order
        cols = windows[:, r0:r1].transpose(0, 3, 4, 1, 2)
        cols = cols.reshape(in_c * kh * kw, (r1 - r0) * out_w)
        out[:, r0:r1] = (wmat @ cols).reshape(out_c, r1 - r0, out_w)
    out += bias[:, None, None]
    return out


def conv2d_valid(x: Tensor3, kernel: ConvKernel) -> Tensor3:
    """Valid cross-correlation, stride 1: out[o] = bias[o] + sum_i x[i] star w[o,i]."""
    if x.channels != kernel.in_channels:
        raise ShapeError(
            f"input channels {x.shape} do not match kernel {kernel.weights.shape}"
        )
    if x.height < kernel.kernel_h or x.width < kernel.kernel_w:
        raise ShapeError(
            f"input {x.shape} smaller than kernel window {kernel.weights.shape}"
        )
    return Tensor3(_gemm_conv(x.data, kernel.weights, kernel.bias))


def conv2d_input_grad(output_grad: Tensor3, kernel: ConvKernel) -> Tensor3:
    """Back-propagate d(loss)/d(output) through conv2d_valid to the input.

    Equivalent to a full (zero-padded) correlation with the spatially flipped
    kernel; output shape equals the original conv input shape. Bias does not
    participate.
    """
    if output_grad.channels != kernel.out_channels:
        raise ShapeError(
            f"output_grad channels {output_grad.shape} do not match kernel "
            f"{kernel.weights.shape}"
        )
    kh, kw = kernel.kernel_h, kernel.kernel_w
    padded = np.pad(output_grad.data, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = np.ascontiguousarray(kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zero_bias = np.zeros(kernel.in_channels, dtype=np.float32)
    return Tensor3(_gemm_conv(padded, flipped, zero_bias))


def conv2d_weight_grad(x: Tensor3, output_grad: Tensor3) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of a conv2d_valid output w.r.t. kernel weights and bias.

    Returns (weight_grad, bias_grad) with shapes (out,in,kh,kw) and (out,).
    Kernel extent is implied by the input/output sizes.
    """
    kh = x.height - output_grad.height + 1
    kw = x.width - output_grad.width + 1
    if kh < 1 or kw < 1:
        raise ShapeError(
            f"output_grad {output_grad.shape} larger than input {x.shape}"
        )
    # wgrad[o,i,a,b] = sum_{r,c} g[o,r,c] * x[i,r+a,c+b]: correlate input windows
    # of the output's extent against the gradient map.
    windows = sliding_window_view(x.data, (output_grad.height, output_grad.width), axis=(1, 2))
    cols = windows.reshape(x.channels * kh * kw, -1).astype(np.float64)
    gmat = output_grad.data.reshape(output_grad.channels, -1).astype(np.float64)
    wgrad = (cols @ gmat.T).reshape(x.channels, kh, kw, output_grad.channels)
    wgrad = wgrad.transpose(3, 0, 1, 2).astype(np.float32)
    bgrad = output_grad.data.sum(axis=(1, 2), dtype=np.float64).astype(np.float32)
    return wgrad, bgrad


def relu(x: Tensor3) -> Tensor3:
    return Tensor3(np.maximum(x.data, 0.0))


def maxpool2(x: Tensor3) -> Tensor3:
    """2x2 max pooling, stride 2; odd edges are replication-padded right/bottom."""
    data = x.data
    if x.height % 2 or x.width % 2:
        data = np.pad(data, ((0, 0), (0, x.height % 2), (0, x.width % 2)), mode="edge")
    a = np.maximum(data[:, ::2, ::2], data[:, 1::2, ::2])
    b = np.maximum(data[:, ::2, 1::2], data[:, 1::2, 1::2])
    return Tensor3(np.maximum(a, b))


def global_avg_pool(x: Tensor3) -> np.ndarray:
    """Per-channel spatial mean, float64 accumulation."""
    return x.data.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)


def cross_correlate(search: Tensor3, template: Tensor3) -> Tensor3:
    """Single-channel sliding inner product of the template over the search map."""
    if search.channels != template.channels:
        raise ShapeError(
            f"search {search.shape} and template {template.shape} channel counts differ"
        )
    if template.height > search.height or template.width > search.width:
        raise ShapeError(
            f"template {template.shape} larger than search region {search.shape}"
        )
    kernel = ConvKernel(template.data[np.newaxis])
    return conv2d_valid(search, kernel)


def resize_bilinear(x: Tensor3, new_h: int, new_w: int) -> Tensor3:
    """Channelwise bilinear resize with corner-aligned sampling.

    Unchanged sizes return the input tensor itself (exact identity).
    """
    if new_h < 1 or new_w < 1:
        raise ShapeError(f"target size ({new_h}, {new_w}) must be positive")
    if new_h == x.height and new_w == x.width:
        return x
    src_r = _corner_aligned_coords(x.height, new_h)
    src_c = _corner_aligned_coords(x.width, new_w)
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, x.height - 1)
    c1 = np.minimum(c0 + 1, x.width - 1)
    wr = (src_r - r0)[np.newaxis, :, np.newaxis]
    wc = (src_c - c0)[np.newaxis, np.newaxis, :]
    data = x.data.astype(np.float64)
    top = data[:, r0][:, :, c0] * (1 - wc) + data[:, r0][:, :, c1] * wc
    bot = data[:, r1][:, :, c0] * (1 - wc) + data[:, r1][:, :, c1] * wc
    return Tensor3((top * (1 - wr) + bot * wr).astype(np.float32))


def _corner_aligned_coords(old: int, new: int) -> np.ndarray:
    if new == 1:
        return np.zeros(1, dtype=np.float64)
    return np.arange(new, dtype=np.float64) * (old - 1) / (new - 1)
