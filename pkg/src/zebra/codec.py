"""ZBRA v1: block-sparse activation-map byte format.

Layout (all scalars little-endian)::

    offset  size  field
    0       4     magic b"ZBRA"
    4       1     version (1)
    5       1     dtype code: 0 = f32, 1 = f16, 2 = u8
    6       4     C (u32)
    10      4     H (u32)
    14      4     W (u32)
    18      2     block_size (u16)
    20      ...   bitmask: one bit per block, channel-major then block row then
                  block column; 1 = block present; MSB-first; zero-padded to a
                  whole byte
    ...     ...   payload: each present block, same order, block_size**2
                  elements in row-major order

Pruned blocks contribute no payload bytes.
"""
from __future__ import annotations

import math
import struct

import numpy as np
import torch

from .errors import (
    FormatError,
    ShapeError,
    TrailingDataError,
    TruncatedStreamError,
    UnrepresentableValueError,
)

MAGIC = b"ZBRA"
VERSION = 1
HEADER = struct.Struct("<4sBBIIIH")
HEADER_SIZE = HEADER.size  # 20

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2"), 2: np.dtype("u1")}
DTYPE_BITS = {code: dt.itemsize * 8 for code, dt in DTYPES.items()}
DTYPE_NAMES = {"f32": 0, "f16": 1, "u8": 2}


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _blocks(arr: np.ndarray, s: int) -> np.ndarray:
    """``[C, H, W]`` -> ``[C * bh * bw, s * s]`` in bitmask order."""
    C, H, W = arr.shape
    return arr.reshape(C, H // s, s, W // s, s).transpose(0, 1, 3, 2, 4).reshape(-1, s * s)


def _cast(arr: np.ndarray, dtype_code: int) -> np.ndarray:
    target = DTYPES[dtype_code]
    with np.errstate(over="ignore", invalid="ignore"):
        cast = arr.astype(target)
        back = cast.astype(arr.dtype) if arr.dtype.kind == "f" else cast.astype(np.float64)
    ref = arr if arr.dtype.kind == "f" else arr.astype(np.float64)
    if not np.array_equal(back, ref):
        bad = np.flatnonzero(back.ravel() != ref.ravel())
        raise UnrepresentableValueError(
            f"{bad.size} value(s) not exactly representable as {target}, "
            f"first at flat index {bad[0]}: {ref.ravel()[bad[0]]!r}"
        )
    return cast


def encoded_size(C: int, H: int, W: int, block_size: int, dtype_bits: int, kept_blocks: int) -> int:
    n_blocks = C * H * W // (block_size * block_size)
    return HEADER_SIZE + math.ceil(n_blocks / 8) + kept_blocks * block_size * block_size * dtype_bits // 8


def encode(x, mask, block_size: int, dtype_code: int = 0) -> bytes:
    """Serialize map ``x [C, H, W]`` with block mask ``mask [C, H/b, W/b]``."""
    if dtype_code not in DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    arr = _to_numpy(x)
    keep = _to_numpy(mask).astype(bool)
    if arr.ndim != 3:
        raise ShapeError(f"expected a [C, H, W] map, got shape {arr.shape}")
    C, H, W = arr.shape
    s = block_size
    if not 1 <= s < 2**16 or H % s or W % s:
        raise ShapeError(f"block size {s} does not divide map {H}x{W}")
    if keep.shape != (C, H // s, W // s):
        raise ShapeError(f"mask shape {keep.shape} does not match map {arr.shape} at block {s}")

    flat_keep = keep.ravel()
    kept = _blocks(arr, s)[flat_keep]
    payload = _cast(kept, dtype_code)
    header = HEADER.pack(MAGIC, VERSION, dtype_code, C, H, W, s)
    return header + np.packbits(flat_keep).tobytes() + payload.tobytes()


def decode(data: bytes) -> tuple[torch.Tensor, torch.Tensor]:
    """Parse a ZBRA stream into ``(map, keep_mask)``.

    The map is returned in the stored dtype (``float32``, ``float16`` or
    ``uint8``) with pruned blocks as exact zeros.
    """
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        if not MAGIC.startswith(data[:4]):
            raise FormatError("bad magic")
        raise TruncatedStreamError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, code, C, H, W, s = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if min(C, H, W, s) < 1 or H % s or W % s:
        raise FormatError(f"invalid geometry C={C} H={H} W={W} block={s}")

    bh, bw = H // s, W // s
    n_blocks = C * bh * bw
    mask_bytes = math.ceil(n_blocks / 8)
    off = HEADER_SIZE
    if len(data) < off + mask_bytes:
        raise TruncatedStreamError(
            f"bitmask needs {mask_bytes} bytes at offset {off}, stream has {len(data) - off}"
        )
    flat_keep = np.unpackbits(np.frombuffer(data, np.uint8, mask_bytes, off), count=n_blocks).astype(bool)
    off += mask_bytes

    dt = DTYPES[code]
    n_kept = int(flat_keep.sum())
    payload_bytes = n_kept * s * s * dt.itemsize
    if len(data) < off + payload_bytes:
        raise TruncatedStreamError(
            f"payload needs {payload_bytes} bytes at offset {off}, stream has {len(data) - off}"
        )
    if len(data) > off + payload_bytes:
        raise TrailingDataError(f"{len(data) - off - payload_bytes} unexpected bytes at offset {off + payload_bytes}")
    payload = np.frombuffer(data, dt, n_kept * s * s, off).reshape(n_kept, s * s)

    blocks = np.zeros((n_blocks, s * s), dtype=dt.newbyteorder("="))
    blocks[flat_keep] = payload
    arr = blocks.reshape(C, bh, bw, s, s).transpose(0, 1, 3, 2, 4).reshape(C, H, W)
    return torch.from_numpy(np.ascontiguousarray(arr)), torch.from_numpy(flat_keep.reshape(C, bh, bw))


# raw map file used by the CLI: C, H, W as u32 little-endian, then f32 elements row-major
RAW_HEADER = struct.Struct("<III")


def write_raw_map(path, x) -> None:
    arr = _to_numpy(x).astype("<f4")
    if arr.ndim != 3:
        raise ShapeError(f"expected a [C, H, W] map, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(RAW_HEADER.pack(*arr.shape))
        f.write(arr.tobytes())


def read_raw_map(path) -> torch.Tensor:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < RAW_HEADER.size:
        raise TruncatedStreamError(f"{path}: raw map header needs {RAW_HEADER.size} bytes")
    C, H, W = RAW_HEADER.unpack_from(data)
    n = C * H * W * 4
    body = data[RAW_HEADER.size:]
    if len(body) < n:
        raise TruncatedStreamError(f"{path}: expected {n} data bytes, found {len(body)}")
    if len(body) > n:
        raise TrailingDataError(f"{path}: {len(body) - n} unexpected bytes after data")
    arr = np.frombuffer(body, "<f4").reshape(C, H, W).astype(np.float32)
    return torch.from_numpy(arr)
