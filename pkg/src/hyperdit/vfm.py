"""Patch-feature files for register alignment, plus a deterministic mock.

FeatureFile binary layout (all integers little-endian):

    magic   8 bytes  b"HDITFEAT"
    version u32      currently 1
    K       u32      tokens per image
    D_f     u32      channels per token
    count   u64      number of records
    then per record:
        id_len  u32
        id      id_len bytes, UTF-8
        tokens  K * D_f float32, row-major

Every record in a file shares one (K, D_f); non-finite values are rejected
on both read and write.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

MAGIC = b"HDITFEAT"
VERSION = 1


class FeatureFileError(ValueError):
    """Malformed, truncated, or inconsistent feature file."""


@dataclass
class FeatureFile:
    """In-memory view of one feature file: ordered per-image token grids."""

    token_count: int
    dim: int
    records: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.token_count <= 0 or self.dim <= 0:
            raise FeatureFileError(
                f"token_count and dim must be positive, got {self.token_count}, {self.dim}"
            )
        for key in list(self.records):
            self.records[key] = self._check(key, self.records[key])

    def _check(self, key: str, tokens: Tensor) -> Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.float32)
        if tokens.shape != (self.token_count, self.dim):
            raise FeatureFileError(
                f"record {key!r} has shape {tuple(tokens.shape)}, file declares "
                f"({self.token_count}, {self.dim})"
            )
        if not torch.isfinite(tokens).all():
            raise FeatureFileError(f"record {key!r} contains non-finite values")
        return tokens

    def add(self, key: str, tokens: Tensor) -> None:
        self.records[key] = self._check(key, tokens)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, key: str) -> Tensor:
        return self.records[key]

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<IIIQ", VERSION, self.token_count, self.dim, len(self.records)))
        for key, tokens in self.records.items():
            raw = key.encode("utf-8")
            out.write(struct.pack("<I", len(raw)))
            out.write(raw)
            out.write(tokens.contiguous().numpy().astype("<f4").tobytes())
        return out.getvalue()

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def _read_exact(fh, size: int, what: str) -> bytes:
    raw = fh.read(size)
    if len(raw) != size:
        raise FeatureFileError(f"truncated feature file while reading {what}")
    return raw


def load_features(path_or_bytes) -> FeatureFile:
    """Parse a binary feature file from a path or raw bytes."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        fh = io.BytesIO(bytes(path_or_bytes))
    else:
        fh = open(path_or_bytes, "rb")
    try:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise FeatureFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, token_count, dim, count = struct.unpack(
            "<IIIQ", _read_exact(fh, 20, "header")
        )
        if version != VERSION:
            raise FeatureFileError(f"unsupported feature file version {version}")
        if token_count <= 0 or dim <= 0:
            raise FeatureFileError(
                f"header declares degenerate token shape ({token_count}, {dim})"
            )
        out = FeatureFile(token_count=token_count, dim=dim)
        payload = token_count * dim * 4
        for i in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4, f"record {i} id length"))
            key = _read_exact(fh, id_len, f"record {i} id").decode("utf-8")
            if key in out.records:
                raise FeatureFileError(f"duplicate record id {key!r}")
            raw = _read_exact(fh, payload, f"record {key!r} payload")
            tokens = torch.frombuffer(bytearray(raw), dtype=torch.float32).reshape(
                token_count, dim
            )
            out.add(key, tokens)
        trailing = fh.read(1)
        if trailing:
            raise FeatureFileError("trailing bytes after the declared record count")
        return out
    finally:
        fh.close()


def mock_features(image: Tensor, token_count: int, dim: int, seed: int = 0) -> Tensor:
    """Deterministic stand-in feature tokens for one ``(C, H, W)`` image.

    Average-pools the image onto a sqrt(K) x sqrt(K) grid, augments each cell
    with a constant channel (so all-zero cells still map to a nonzero
    vector), projects through a seeded fixed random matrix, and
    L2-normalizes.  Local by construction: editing one cell touches only its
    token.
    """
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(image.shape)}")
    side = int(round(token_count**0.5))
    if side * side != token_count:
        raise ValueError(f"token_count must be a perfect square, got {token_count}")
    if dim <= 0:
        raise ValueError(f"feature dim must be positive, got {dim}")
    channels = image.shape[0]
    pooled = F.adaptive_avg_pool2d(image.unsqueeze(0).float(), side).squeeze(0)
    cells = pooled.reshape(channels, token_count).T  # (K, C)
    cells = torch.cat([cells, torch.ones(token_count, 1)], dim=1)
    rng = torch.Generator().manual_seed(seed)
    matrix = torch.randn(channels + 1, dim, generator=rng) / (channels + 1) ** 0.5
    tokens = cells @ matrix
    return F.normalize(tokens, dim=-1, eps=1e-12)


def mock_feature_batch(images: Tensor, token_count: int, dim: int, seed: int = 0) -> Tensor:
    """Vectorized :func:`mock_features` over ``(B, C, H, W)``, one shared matrix."""
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
    side = int(round(token_count**0.5))
    if side * side != token_count:
        raise ValueError(f"token_count must be a perfect square, got {token_count}")
    batch, channels = images.shape[:2]
    pooled = F.adaptive_avg_pool2d(images.float(), side)
    cells = pooled.reshape(batch, channels, token_count).transpose(1, 2)  # (B, K, C)
    cells = torch.cat([cells, torch.ones(batch, token_count, 1)], dim=2)
    rng = torch.Generator().manual_seed(seed)
    matrix = torch.randn(channels + 1, dim, generator=rng) / (channels + 1) ** 0.5
    tokens = cells @ matrix
    return F.normalize(tokens, dim=-1, eps=1e-12)


def pool_tokens(tokens: Tensor, target_count: int) -> Tensor:
    """Mean-pool ``(..., K, D)`` tokens down to ``(..., target_count, D)``.

    Both counts must be perfect squares with an integer side ratio; pooling
    happens on the implied 2D grid so spatial neighborhoods stay together.
    """
    count = tokens.shape[-2]
    if count == target_count:
        return tokens
    side = int(round(count**0.5))
    target_side = int(round(target_count**0.5))
    if side * side != count or target_side * target_side != target_count:
        raise ValueError(
            f"token counts must be perfect squares to pool on a grid, got "
            f"{count} -> {target_count}"
        )
    if target_side == 0 or side % target_side:
        raise ValueError(
            f"grid side {side} is not an integer multiple of target side {target_side}"
        )
    factor = side // target_side
    lead = tokens.shape[:-2]
    dim = tokens.shape[-1]
    x = tokens.reshape(-1, side, side, dim)
    x = x.reshape(-1, target_side, factor, target_side, factor, dim).mean(dim=(2, 4))
    return x.reshape(*lead, target_count, dim)
