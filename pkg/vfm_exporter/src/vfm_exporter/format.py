"""Streaming writer for the HDITFEAT feature-file format.

Layout (all integers little-endian):

    bytes 0..8    magic ``HDITFEAT``
    u32           format version (1)
    u32           K   — tokens per record
    u32           D_f — channels per token
    u64           record count
    per record:   u32 id length, id bytes (utf-8), K*D_f float32 values

This module implements the format independently; the byte layout is the whole
contract with consumers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HDITFEAT"
VERSION = 1
_HEADER = struct.Struct("<IIIQ")  # version, K, D_f, count
_COUNT_OFFSET = len(MAGIC) + 12  # the u64 count sits after three u32 fields


class FeatureWriteError(ValueError):
    """Raised when a record does not fit the declared file geometry."""


class FeatureWriter:
    """Append records one at a time; the header count is patched on close."""

    def __init__(self, path: str | Path, token_count: int, dim: int):
        if token_count <= 0 or dim <= 0:
            raise FeatureWriteError(
                f"token_count and dim must be positive, got {token_count}, {dim}"
            )
        self.token_count = token_count
        self.dim = dim
        self.count = 0
        self._fh = open(path, "wb")
        self._fh.write(MAGIC)
        self._fh.write(_HEADER.pack(VERSION, token_count, dim, 0))

    def add(self, key: str, tokens: np.ndarray) -> None:
        if self._fh is None:
            raise FeatureWriteError("writer is closed")
        arr = np.ascontiguousarray(tokens, dtype="<f4")
        if arr.shape != (self.token_count, self.dim):
            raise FeatureWriteError(
                f"record {key!r} has shape {arr.shape}, file declares "
                f"({self.token_count}, {self.dim})"
            )
        if not np.isfinite(arr).all():
            raise FeatureWriteError(f"record {key!r} contains non-finite values")
        encoded = key.encode("utf-8")
        self._fh.write(struct.pack("<I", len(encoded)))
        self._fh.write(encoded)
        self._fh.write(arr.tobytes())
        self.count += 1

    def close(self) -> None:
        if self._fh is None:
            return
        self._fh.seek(_COUNT_OFFSET)
        self._fh.write(struct.pack("<Q", self.count))
        self._fh.close()
        self._fh = None

    def __enter__(self) -> "FeatureWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
