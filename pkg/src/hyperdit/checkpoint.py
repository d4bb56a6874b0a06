"""Binary checkpoint format.

Layout (integers little-endian):

    magic    8 bytes  b"HDITCKPT"
    version  u32      currently 1
    cfg_len  u64
    cfg      cfg_len bytes, UTF-8 model-config lines ("name = value")
    then named tensors until EOF, each:
        name_len u32
        name     name_len bytes, UTF-8
        rank     u32
        dims     rank * u64
        payload  prod(dims) float32, little-endian

Only float32 payloads exist in the format; byte-like state (RNG) is widened
to float32 on write and narrowed back on read.  Writing is deterministic:
the same state always produces the same bytes.
"""

from __future__ import annotations

import struct
import typing
from dataclasses import fields

import torch
from torch import Tensor

from .config import ModelConfig, _coerce, _format_value

MAGIC = b"HDITCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that contradicts the requesting config."""


def model_config_to_text(config: ModelConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    hints = typing.get_type_hints(ModelConfig)
    known = {f.name for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep or key not in known:
            raise CheckpointError(f"config blob line {lineno}: unknown entry {line!r}")
        values[key] = _coerce(raw.strip(), hints[key], f"model.{key}")
    config = ModelConfig(**values)
    config.validate()
    return config


def write_checkpoint(path: str, config: ModelConfig, tensors: dict[str, Tensor]) -> None:
    blob = model_config_to_text(config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, tensor in tensors.items():
            data = tensor.detach().to(torch.float32).contiguous()
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(data.numpy().astype("<f4").tobytes())


def _read_exact(fh, size: int, what: str) -> bytes:
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def read_checkpoint(path: str) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<Q", _read_exact(fh, 8, "config length"))
        config = model_config_from_text(_read_exact(fh, cfg_len, "config blob").decode("utf-8"))
        tensors: dict[str, Tensor] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint while reading a tensor name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name!r}"))
            dims = struct.unpack(
                "<" + "Q" * rank, _read_exact(fh, 8 * rank, f"dims of {name!r}")
            )
            numel = 1
            for dim in dims:
                numel *= dim
            raw = _read_exact(fh, numel * 4, f"payload of {name!r}")
            tensors[name] = torch.frombuffer(bytearray(raw), dtype=torch.float32).reshape(dims)
        return config, tensors


def check_config_matches(loaded: ModelConfig, expected: ModelConfig) -> None:
    """Raise with a field-by-field diff when a checkpoint disagrees with a run."""
    diffs = []
    for f in fields(ModelConfig):
        a = getattr(loaded, f.name)
        b = getattr(expected, f.name)
        if a != b:
            diffs.append(f"model.{f.name}: checkpoint has {a!r}, run config has {b!r}")
    if diffs:
        raise CheckpointError("checkpoint/config mismatch: " + "; ".join(diffs))


def encode_rng_state(state: Tensor) -> Tensor:
    """Widen a uint8 RNG state vector to float32 for storage."""
    return state.to(torch.float32)


def decode_rng_state(tensor: Tensor) -> Tensor:
    values = tensor.round().clamp(0, 255)
    return values.to(torch.uint8)
