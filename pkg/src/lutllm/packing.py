"""Bit-level packing of centroid indices.

Indices are packed little-endian within each byte, lowest bits first: with a
4-bit width, ``[0, 1, 2, 3]`` becomes ``b"\\x10\\x32"``.
"""

from __future__ import annotations

import numpy as np

VALID_WIDTHS = (1, 2, 4, 8)


def _check_width(bit_width: int) -> None:
    if bit_width not in VALID_WIDTHS:
        raise ValueError(f"bit_width must be one of {VALID_WIDTHS}, got {bit_width}")


def packed_nbytes(count: int, bit_width: int) -> int:
    return (count * bit_width + 7) // 8


def pack_indices(indices, bit_width: int) -> bytes:
    _check_width(bit_width)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return b""
    if idx.min() < 0 or idx.max() >= (1 << bit_width):
        raise ValueError(f"index out of range for {bit_width}-bit packing")
    per_byte = 8 // bit_width
    pad = (-idx.size) % per_byte
    if pad:
        idx = np.concatenate([idx, np.zeros(pad, dtype=np.int64)])
    lanes = idx.reshape(-1, per_byte).astype(np.uint16)
    shifts = (np.arange(per_byte, dtype=np.uint16) * bit_width)[None, :]
    packed = np.bitwise_or.reduce(lanes << shifts, axis=1).astype(np.uint8)
    return packed.tobytes()


def unpack_indices(data: bytes, bit_width: int, count: int) -> np.ndarray:
    _check_width(bit_width)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    need = packed_nbytes(count, bit_width)
    if len(data) < need:
        raise ValueError(f"need {need} bytes to unpack {count} indices, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need)
    per_byte = 8 // bit_width
    shifts = (np.arange(per_byte, dtype=np.uint8) * bit_width)[None, :]
    mask = np.uint8((1 << bit_width) - 1)
    lanes = (raw[:, None] >> shifts) & mask
    return lanes.reshape(-1)[:count].astype(np.int64)
