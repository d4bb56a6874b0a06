"""Semantics stream: conditioned transformer over coarse patches and registers.

Blocks follow the adaLN-Zero recipe: a shared condition vector drives
per-block shift/scale/gate triples whose projections start at zero, so a
fresh model is an exact identity map from its input sequence to every anchor.
Register tokens are learned input slots prepended to the patch tokens; they
carry no spatial position and pass rotary application unrotated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .config import ModelConfig
from .patching import PatchGrid, TokenSequence, patchify
from .rope import RotaryBasis, compute_base_patch, rope_cos_sin, rotate_pairs, unified_grid


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def attention_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Softmax attention with float64 internals.

    Accumulating logit sums and value mixes in double precision keeps the
    result stable (at float32 resolution) under reorderings of the key axis,
    which the register-permutation contract relies on.  Inputs and output are
    ``(..., N, head_dim)`` in the caller's dtype.
    """
    wide = torch.promote_types(q.dtype, torch.float64)
    qd = q.to(wide)
    kd = k.to(wide)
    vd = v.to(wide)
    logits = qd @ kd.transpose(-2, -1) / math.sqrt(q.shape[-1])
    probs = torch.softmax(logits, dim=-1)
    return (probs @ vd).to(q.dtype)


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of continuous t in [0, 1], refined by a small MLP."""

    def __init__(self, hidden_dim: int, freq_dim: int = 256, time_scale: float = 1000.0):
        super().__init__()
        if freq_dim % 2:
            raise ValueError(f"freq_dim must be even, got {freq_dim}")
        self.freq_dim = freq_dim
        self.time_scale = time_scale
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    def forward(self, t: Tensor) -> Tensor:
        if t.ndim != 1:
            raise ValueError(f"expected a (B,) time vector, got shape {tuple(t.shape)}")
        half = self.freq_dim // 2
        exponent = torch.arange(half, dtype=t.dtype, device=t.device) / half
        freqs = torch.exp(-math.log(10000.0) * exponent)
        args = t[:, None] * self.time_scale * freqs[None, :]
        return self.mlp(torch.cat([args.cos(), args.sin()], dim=-1))


class LabelEmbedder(nn.Module):
    """Class-label table with one extra null row for unconditional prediction."""

    def __init__(self, num_classes: int, hidden_dim: int):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes + 1, hidden_dim)

    @property
    def null_index(self) -> int:
        return self.num_classes

    def forward(self, labels: Tensor) -> Tensor:
        if labels.ndim != 1:
            raise ValueError(f"expected a (B,) label vector, got shape {tuple(labels.shape)}")
        if labels.numel() and (labels.min() < 0 or labels.max() > self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}] (null = {self.num_classes})"
            )
        return self.table(labels)


class ConditionEmbedder(nn.Module):
    """Fused timestep + class vector that drives every modulation and gate."""

    def __init__(self, hidden_dim: int, num_classes: int):
        super().__init__()
        self.time = TimestepEmbedder(hidden_dim)
        self.label = LabelEmbedder(num_classes, hidden_dim)

    @property
    def null_index(self) -> int:
        return self.label.null_index

    def forward(self, t: Tensor, labels: Tensor) -> Tensor:
        return self.time(t) + self.label(labels)


class RotarySelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"num_heads {num_heads} must divide dim {dim}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
        batch, count, dim = x.shape
        qkv = self.qkv(x).reshape(batch, count, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        q = rotate_pairs(q, cos, sin)
        k = rotate_pairs(k, cos, sin)
        out = attention_core(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(batch, count, dim))


class DiTBlock(nn.Module):
    """Pre-norm transformer block with zero-initialized modulation and gates."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = RotarySelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        mlp_dim = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_dim),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_dim, dim),
        )
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)

    def forward(self, x: Tensor, cond: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.adaln(cond).chunk(6, dim=-1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a), cos, sin)
        x = x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


@dataclass
class AnchorSet:
    """Intermediate semantic states tapped at a uniform block stride.

    ``anchors[i]`` is the output of block ``(i+1)*stride`` with shape
    ``(B, n_register + N_patch, D)`` (or without the register rows when they
    are excluded from anchors).  ``registers`` always holds the final block's
    register outputs for the alignment head.
    """

    anchors: list[Tensor]
    registers: Tensor
    n_register: int
    grid: PatchGrid

    @property
    def count(self) -> int:
        return len(self.anchors)


class SemanticsFlow(nn.Module):
    """Coarse-patch conditioned transformer emitting multi-level anchors."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.patch_embed = nn.Linear(config.patch_dim_large, config.hidden_dim)
        self.registers = nn.Parameter(
            torch.randn(config.num_registers, config.hidden_dim) * 0.02
        )
        self.blocks = nn.ModuleList(
            DiTBlock(config.hidden_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.dit_blocks)
        )
        self.basis = RotaryBasis(config.head_dim, config.rope_theta)

    def base_patch(self, height: int, width: int) -> int:
        if self.config.base_patch is not None:
            return self.config.base_patch
        return compute_base_patch(height, width, self.config.patch_small, self.config.patch_large)

    def rope_tables(self, grid: PatchGrid, device, dtype) -> tuple[Tensor, Tensor]:
        """Cos/sin rows for registers (unrotated) followed by the patch grid."""
        positions = unified_grid(
            grid, self.base_patch(grid.height, grid.width), dtype=dtype, device=device
        )
        n_reg = self.config.num_registers
        if n_reg:
            positions = torch.cat(
                [positions.new_zeros(n_reg, 2), positions], dim=0
            )
            non_spatial = torch.zeros(positions.shape[0], dtype=torch.bool, device=device)
            non_spatial[:n_reg] = True
        else:
            non_spatial = None
        return rope_cos_sin(positions, self.basis, non_spatial, dtype=dtype, device=device)

    def forward(self, image: Tensor, cond: Tensor) -> AnchorSet:
        if image.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(image.shape)}")
        seq = patchify(image, self.config.patch_large)
        tokens = self.patch_embed(seq.tokens)
        batch = tokens.shape[0]
        n_reg = self.config.num_registers
        if n_reg:
            regs = self.registers.unsqueeze(0).expand(batch, -1, -1)
            tokens = torch.cat([regs.to(tokens.dtype), tokens], dim=1)
        cos, sin = self.rope_tables(seq.grid, tokens.device, tokens.dtype)

        stride = self.config.anchor_stride if self.config.num_connectors else 0
        anchors: list[Tensor] = []
        x = tokens
        for idx, block in enumerate(self.blocks, start=1):
            x = block(x, cond, cos, sin)
            if stride and idx % stride == 0:
                anchors.append(x if self.config.anchors_include_registers else x[:, n_reg:])
        anchors = anchors[: self.config.num_connectors]
        registers = x[:, :n_reg]
        anchor_regs = n_reg if self.config.anchors_include_registers else 0
        return AnchorSet(
            anchors=anchors, registers=registers, n_register=anchor_regs, grid=seq.grid
        )


def count_parameters(config: ModelConfig) -> int:
    """Exact learned-scalar count of the full generator for a config."""
    from .model import HyperDiT

    return sum(p.numel() for p in HyperDiT(config).parameters())
