"""TADTW1 writer: the binary weight format consumed by the tracking engine.

Layout (little-endian): magic "TADTW1", layer count u32, then per conv layer
a u16 name length, the UTF-8 name, dims 4xu32 (out, in, kh, kw), float32
weights and bias; finally an 8-byte CRC-64 (xz polynomial) of everything
preceding it.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TADTW1"

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


def crc64(data: bytes) -> int:
    """CRC-64/XZ; jitted when numba is importable, pure Python otherwise."""
    global _crc64_jit
    if _crc64_jit is None:
        try:
            import numba

            @numba.njit(cache=False)
            def _kernel(buf, table):
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
    table = _CRC_TABLE.tolist()
    crc = 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def write_tadtw(path, layers: list[tuple[str, np.ndarray, np.ndarray]]) -> int:
    """Serialize (name, weights(out,in,kh,kw), bias(out,)) conv layers.

    Returns the file's CRC-64 value (also written as the trailer).
    """
    chunks = [MAGIC, struct.pack("<I", len(layers))]
    for name, weights, bias in layers:
        weights = np.ascontiguousarray(weights, dtype="<f4")
        bias = np.ascontiguousarray(bias, dtype="<f4")
        if weights.ndim != 4 or bias.shape != (weights.shape[0],):
            raise ValueError(f"{name}: bad shapes {weights.shape} / {bias.shape}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<4I", *weights.shape))
        chunks.append(weights.tobytes())
        chunks.append(bias.tobytes())
    payload = b"".join(chunks)
    checksum = crc64(payload)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))
    return checksum
