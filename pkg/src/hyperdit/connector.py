"""Fine-grained stream: gated cross-attention into semantic anchors.

Each connector block reads the running fine state, queries one anchor
sequence, and adds the attended result through a zero-initialized gate:

    f_i = f_{i-1} + gate * CrossAttn(W_q AdaLN(f_{i-1}), W_k s_i, W_v s_i)

Queries are modulated and rotated by fine-grid positions; anchor keys are
rotated by coarse-grid positions (registers unrotated) but otherwise taken
as-is, so anchors arrive unnormalized.  An optional gated MLP sublayer
follows.  At init all gates are zero, making the whole stream an identity on
its embedded input; the pixel head is also zero-initialized, so a fresh model
emits exactly zero.
"""

from __future__ import annotations

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import AnchorSet, attention_core, modulate
from .config import ModelConfig
from .patching import PatchGrid, patchify, unpatchify
from .rope import RotaryBasis, rope_cos_sin, rotate_pairs, unified_grid


class RotaryCrossAttention(nn.Module):
    """Multi-head attention of fine queries over anchor keys/values."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"num_heads {num_heads} must divide dim {dim}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        batch, count, _ = x.shape
        return x.reshape(batch, count, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        fine: Tensor,
        anchor: Tensor,
        q_cos: Tensor,
        q_sin: Tensor,
        k_cos: Tensor,
        k_sin: Tensor,
    ) -> Tensor:
        batch, count, dim = fine.shape
        q = rotate_pairs(self._split(self.w_q(fine)), q_cos, q_sin)
        k = rotate_pairs(self._split(self.w_k(anchor)), k_cos, k_sin)
        v = self._split(self.w_v(anchor))
        out = attention_core(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(batch, count, dim))


class HyperConnector(nn.Module):
    """One fine-stream block: gated cross-attention, then an optional gated MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, with_mlp: bool = True):
        super().__init__()
        self.with_mlp = with_mlp
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.cross = RotaryCrossAttention(dim, num_heads)
        n_mod = 6 if with_mlp else 3
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(dim, n_mod * dim))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)
        if with_mlp:
            self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
            mlp_dim = int(dim * mlp_ratio)
            self.mlp = nn.Sequential(
                nn.Linear(dim, mlp_dim),
                nn.GELU(approximate="tanh"),
                nn.Linear(mlp_dim, dim),
            )

    def forward(
        self,
        fine: Tensor,
        anchor: Tensor,
        cond: Tensor,
        q_cos: Tensor,
        q_sin: Tensor,
        k_cos: Tensor,
        k_sin: Tensor,
    ) -> Tensor:
        mods = self.adaln(cond).chunk(6 if self.with_mlp else 3, dim=-1)
        shift, scale, gate = mods[0], mods[1], mods[2]
        queries = modulate(self.norm1(fine), shift, scale)
        fine = fine + gate.unsqueeze(1) * self.cross(queries, anchor, q_cos, q_sin, k_cos, k_sin)
        if self.with_mlp:
            shift2, scale2, gate2 = mods[3], mods[4], mods[5]
            fine = fine + gate2.unsqueeze(1) * self.mlp(modulate(self.norm2(fine), shift2, scale2))
        return fine


class FinalLayer(nn.Module):
    """Modulated norm + zero-initialized linear projection back to patch pixels."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)
        self.proj = nn.Linear(dim, out_dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = self.adaln(cond).chunk(2, dim=-1)
        return self.proj(modulate(self.norm(x), shift, scale))


class FineGrainedFlow(nn.Module):
    """Small-patch stream guided by anchors; renders the model's raster output."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.patch_embed = nn.Linear(config.patch_dim_small, config.hidden_dim)
        self.connectors = nn.ModuleList(
            HyperConnector(
                config.hidden_dim, config.num_heads, config.mlp_ratio, config.connector_mlp
            )
            for _ in range(config.num_connectors)
        )
        self.final = FinalLayer(config.hidden_dim, config.patch_dim_small)
        self.basis = RotaryBasis(config.head_dim, config.rope_theta)

    def _anchor_tables(
        self, anchors: AnchorSet, base: int, device, dtype
    ) -> tuple[Tensor, Tensor]:
        positions = unified_grid(anchors.grid, base, dtype=dtype, device=device)
        if anchors.n_register:
            positions = torch.cat(
                [positions.new_zeros(anchors.n_register, 2), positions], dim=0
            )
            non_spatial = torch.zeros(positions.shape[0], dtype=torch.bool, device=device)
            non_spatial[: anchors.n_register] = True
        else:
            non_spatial = None
        return rope_cos_sin(positions, self.basis, non_spatial, dtype=dtype, device=device)

    def forward(self, image: Tensor, anchors: AnchorSet, cond: Tensor) -> Tensor:
        if image.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(image.shape)}")
        if anchors.count != len(self.connectors):
            raise ValueError(
                f"got {anchors.count} anchor levels for {len(self.connectors)} connectors"
            )
        seq = patchify(image, self.config.patch_small)
        fine = self.patch_embed(seq.tokens)

        base = self.config.base_patch
        if base is None:
            from .rope import compute_base_patch

            base = compute_base_patch(
                seq.grid.height, seq.grid.width, self.config.patch_small, self.config.patch_large
            )
        q_pos = unified_grid(seq.grid, base, dtype=fine.dtype, device=fine.device)
        q_cos, q_sin = rope_cos_sin(q_pos, self.basis, dtype=fine.dtype, device=fine.device)
        k_cos, k_sin = self._anchor_tables(anchors, base, fine.device, fine.dtype)

        for connector, anchor in zip(self.connectors, anchors.anchors):
            expected = anchors.n_register + anchors.grid.num_patches
            if anchor.shape[1] != expected:
                raise ValueError(
                    f"anchor has {anchor.shape[1]} tokens, expected {expected} "
                    f"({anchors.n_register} registers + {anchors.grid.num_patches} patches)"
                )
            fine = connector(fine, anchor, cond, q_cos, q_sin, k_cos, k_sin)

        out_tokens = self.final(fine, cond)
        return unpatchify(out_tokens, seq.grid)
