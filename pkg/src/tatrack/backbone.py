"""VGG-16 prefix feature extractor driven by TADTW1 weight files.

The network is the fixed conv1_1 .. conv4_3 stack (three 2x2 pools, total
stride 8). Inputs are RGB pixel tensors in [0, 255]; preprocessing subtracts
the per-channel means once, with no further scaling. Exported activations
("taps") are taken after the ReLU that follows conv4_1 / conv4_3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import ConvKernel, ShapeError, Tensor3, conv2d_valid, maxpool2, relu

MAGIC = b"TADTW1"
CHANNEL_MEANS = (123.68, 116.779, 103.939)  # R, G, B
FEATURE_STRIDE = 8
DEFAULT_TAPS = ("conv4_1", "conv4_3")

# name -> (out_channels, in_channels); all conv kernels are 3x3 with same-padding
VGG16_CONV_SHAPES = {
    "conv1_1": (64, 3),
    "conv1_2": (64, 64),
    "conv2_1": (128, 64),
    "conv2_2": (128, 128),
    "conv3_1": (256, 128),
    "conv3_2": (256, 256),
    "conv3_3": (256, 256),
    "conv4_1": (512, 256),
    "conv4_2": (512, 512),
    "conv4_3": (512, 512),
}

# (name, kind) in forward order; pools follow blocks 1, 2 and 3
VGG16_LAYERS = (
    ("conv1_1", "conv3x3"), ("relu1_1", "relu"),
    ("conv1_2", "conv3x3"), ("relu1_2", "relu"),
    ("pool1", "maxpool2"),
    ("conv2_1", "conv3x3"), ("relu2_1", "relu"),
    ("conv2_2", "conv3x3"), ("relu2_2", "relu"),
    ("pool2", "maxpool2"),
    ("conv3_1", "conv3x3"), ("relu3_1", "relu"),
    ("conv3_2", "conv3x3"), ("relu3_2", "relu"),
    ("conv3_3", "conv3x3"), ("relu3_3", "relu"),
    ("pool3", "maxpool2"),
    ("conv4_1", "conv3x3"), ("relu4_1", "relu"),
    ("conv4_2", "conv3x3"), ("relu4_2", "relu"),
    ("conv4_3", "conv3x3"), ("relu4_3", "relu"),
)


class WeightFileError(Exception):
    """Base class for TADTW1 ingestion failures."""


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class LayerShapeError(WeightFileError):
    pass


class NonFiniteWeightError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv3x3 | relu | maxpool2
    in_channels: int = 0
    out_channels: int = 0


@dataclass(frozen=True)
class BackboneModel:
    """Immutable loaded backbone: layer plan plus one ConvKernel per conv layer."""

    layers: tuple[LayerSpec, ...]
    kernels: dict[str, ConvKernel]
    tap_names: tuple[str, ...] = DEFAULT_TAPS


def _layer_specs() -> tuple[LayerSpec, ...]:
    specs = []
    for name, kind in VGG16_LAYERS:
        if kind == "conv3x3":
            out_c, in_c = VGG16_CONV_SHAPES[name]
            specs.append(LayerSpec(name, kind, in_channels=in_c, out_channels=out_c))
        else:
            specs.append(LayerSpec(name, kind))
    return tuple(specs)


# ---------------------------------------------------------------------------
# CRC-64 (xz variant: reflected, poly 0xC96C5795D7870F42, init/xorout all-ones)

_CRC_POLY = 0xC96C5795D7870F42


def _crc_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ (_CRC_POLY if c & 1 else 0)
        table[i] = c
    return table


_CRC_TABLE = _crc_table()
_crc64_jit = None


def _crc64_python(data: bytes) -> int:
    table = _CRC_TABLE.tolist()
    crc = 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def crc64(data: bytes) -> int:
    """CRC-64/XZ of a byte string. Uses a numba kernel when available."""
    global _crc64_jit
    if _crc64_jit is None:
        try:
            import numba

            @numba.njit(cache=False)
            def _kernel(buf, table):  # pragma: no cover - exercised via crc64()
                crc = np.uint64(0xFFFFFFFFFFFFFFFF)
                for i in range(buf.size):
                    crc = table[(crc ^ np.uint64(buf[i])) & np.uint64(0xFF)] ^ (
                        crc >> np.uint64(8)
                    )
                return crc ^ np.uint64(0xFFFFFFFFFFFFFFFF)

            _crc64_jit = _kernel
        except ImportError:
            _crc64_jit = False
    if _crc64_jit:
        return int(_crc64_jit(np.frombuffer(data, dtype=np.uint8), _CRC_TABLE))
    return _crc64_python(data)


# ---------------------------------------------------------------------------
# TADTW1 serialization


def save_weights(model: BackboneModel, path) -> None:
    """Serialize conv kernels to a TADTW1 file (little-endian, CRC64 trailer)."""
    chunks = [MAGIC]
    conv_names = [s.name for s in model.layers if s.kind == "conv3x3"]
    chunks.append(struct.pack("<I", len(conv_names)))
    for name in conv_names:
        k = model.kernels[name]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<4I", k.out_channels, k.in_channels, k.kernel_h, k.kernel_w))
        chunks.append(k.weights.astype("<f4").tobytes())
        chunks.append(k.bias.astype("<f4").tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", crc64(payload)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file ends at byte {len(self.buf)} but {self.pos + n} were needed"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def load_weights(path) -> BackboneModel:
    """Parse a TADTW1 file and validate it against the fixed VGG-16 layer plan."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8:
        raise TruncatedFileError(f"file is only {len(raw)} bytes")
    payload, trailer = raw[:-8], raw[-8:]
    if payload[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {payload[:6]!r}, expected {MAGIC!r}")
    if struct.unpack("<Q", trailer)[0] != crc64(payload):
        raise ChecksumError("CRC64 trailer does not match file contents")

    reader = _Reader(payload)
    reader.take(len(MAGIC))
    (layer_count,) = struct.unpack("<I", reader.take(4))
    kernels: dict[str, ConvKernel] = {}
    for _ in range(layer_count):
        (name_len,) = struct.unpack("<H", reader.take(2))
        name = reader.take(name_len).decode("utf-8")
        out_c, in_c, kh, kw = struct.unpack("<4I", reader.take(16))
        weights = np.frombuffer(reader.take(out_c * in_c * kh * kw * 4), dtype="<f4")
        bias = np.frombuffer(reader.take(out_c * 4), dtype="<f4")
        if name not in VGG16_CONV_SHAPES:
            raise LayerShapeError(f"unknown conv layer {name!r}")
        want_out, want_in = VGG16_CONV_SHAPES[name]
        if (out_c, in_c, kh, kw) != (want_out, want_in, 3, 3):
            raise LayerShapeError(
                f"{name}: got {(out_c, in_c, kh, kw)}, expected {(want_out, want_in, 3, 3)}"
            )
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise NonFiniteWeightError(f"{name} contains non-finite weights")
        kernels[name] = ConvKernel(weights.reshape(out_c, in_c, kh, kw), bias)
    if reader.pos != len(payload):
        raise TruncatedFileError(f"{len(payload) - reader.pos} unparsed trailing bytes")

    missing = sorted(set(VGG16_CONV_SHAPES) - set(kernels))
    if missing:
        raise LayerShapeError(f"missing conv layers: {', '.join(missing)}")
    return BackboneModel(layers=_layer_specs(), kernels=kernels)


def random_model(seed: int = 0, scale: float = 1.0) -> BackboneModel:
    """Deterministic random backbone with variance-preserving weight magnitudes.

    Useful for synthetic tracking runs and tests when no exported checkpoint
    is at hand.
    """
    rng = np.random.default_rng(seed)
    kernels = {}
    for name, (out_c, in_c) in VGG16_CONV_SHAPES.items():
        std = scale * np.sqrt(2.0 / (in_c * 9))
        weights = rng.normal(0.0, std, (out_c, in_c, 3, 3)).astype(np.float32)
        bias = rng.normal(0.0, 0.05, out_c).astype(np.float32)
        kernels[name] = ConvKernel(weights, bias)
    return BackboneModel(layers=_layer_specs(), kernels=kernels)


def zero_model() -> BackboneModel:
    kernels = {
        name: ConvKernel.zeros(out_c, in_c, 3, 3)
        for name, (out_c, in_c) in VGG16_CONV_SHAPES.items()
    }
    return BackboneModel(layers=_layer_specs(), kernels=kernels)


# ---------------------------------------------------------------------------
# Forward pass


def preprocess(patch: Tensor3) -> Tensor3:
    """Subtract the fixed per-channel RGB means. Applied exactly once."""
    if patch.channels != 3:
        raise ShapeError(f"image patch must have 3 channels, got {patch.shape}")
    means = np.asarray(CHANNEL_MEANS, dtype=np.float32).reshape(3, 1, 1)
    return Tensor3(patch.data - means)


def _conv_same(x: Tensor3, kernel: ConvKernel) -> Tensor3:
    padded = Tensor3(np.pad(x.data, ((0, 0), (1, 1), (1, 1))))
    return conv2d_valid(padded, kernel)


def forward_taps(model: BackboneModel, patch: Tensor3) -> dict[str, Tensor3]:
    """Run the backbone on an RGB patch; return post-ReLU activations at the taps.

    Tap spatial size is ceil(input / 8): pools replication-pad odd edges.
    """
    if patch.height < 16 or patch.width < 16:
        raise ShapeError(f"patch {patch.shape} too small; need at least 16x16")
    x = preprocess(patch)
    taps: dict[str, Tensor3] = {}
    pending_conv: str | None = None
    for spec in model.layers:
        if spec.kind == "conv3x3":
            x = _conv_same(x, model.kernels[spec.name])
            pending_conv = spec.name
        elif spec.kind == "relu":
            x = relu(x)
            if pending_conv in model.tap_names:
                taps[pending_conv] = x
            pending_conv = None
        else:
            x = maxpool2(x)
    return taps
