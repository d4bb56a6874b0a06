"""Scale-aware rotary positions on a shared base grid.

Tokens from different patch sizes live on one coordinate system: a patch at
grid index ``(i, j)`` with pixel size ``p`` sits at its center,
``(i*p + p/2) / p_base``, measured in units of the base patch.  Coarse and
fine streams therefore rotate by geometrically comparable angles, and a base
patch chosen by :func:`compute_base_patch` keeps the two streams' integer
coordinates disjoint (even vs. odd) so no cross-scale pair ever collides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
from torch import Tensor

from .patching import PatchGrid


class UnifiedPosition(NamedTuple):
    i: float
    j: float


def compute_base_patch(height: int, width: int, patch_small: int, patch_large: int) -> int:
    """Power-of-two base-grid unit for a two-scale token layout.

    Uses the longest image side L: with L/p_s + L/p_l tokens spanning a row
    across both streams, the base patch is 2**floor(log2(L / that count)),
    floored at 1.
    """
    if patch_small <= 0 or patch_large <= 0:
        raise ValueError(
            f"patch sizes must be positive, got {patch_small} and {patch_large}"
        )
    if patch_small > patch_large:
        raise ValueError(
            f"patch_small ({patch_small}) must not exceed patch_large ({patch_large})"
        )
    if height <= 0 or width <= 0:
        raise ValueError(f"image size must be positive, got {height}x{width}")
    for p in (patch_small, patch_large):
        if height % p or width % p:
            raise ValueError(f"patch size {p} does not divide image {height}x{width}")
    longest = max(height, width)
    tokens_per_row = longest / patch_small + longest / patch_large
    exponent = math.floor(math.log2(longest / tokens_per_row))
    return 2 ** max(exponent, 0)


def unified_index(i: int, j: int, patch: int, base_patch: int) -> UnifiedPosition:
    """Center coordinates of patch ``(i, j)`` in base-grid units."""
    if patch <= 0 or base_patch <= 0:
        raise ValueError(f"patch sizes must be positive, got {patch} and {base_patch}")
    if i < 0 or j < 0:
        raise ValueError(f"grid indices must be non-negative, got ({i}, {j})")
    return UnifiedPosition(
        (i * patch + patch / 2) / base_patch,
        (j * patch + patch / 2) / base_patch,
    )


def unified_grid(grid: PatchGrid, base_patch: int, dtype=torch.float32, device=None) -> Tensor:
    """Unified ``(i', j')`` positions for a whole grid, raster order, (N, 2)."""
    if base_patch <= 0:
        raise ValueError(f"base_patch must be positive, got {base_patch}")
    idx = grid.grid_indices(device=device).to(dtype)
    return (idx * grid.patch + grid.patch / 2.0) / base_patch


@dataclass(frozen=True)
class RotaryBasis:
    """Per-axis rotation frequencies for one attention head.

    A head of width d spends d/2 channel pairs on rotation: the first d/4
    pairs rotate by the row coordinate, the rest by the column coordinate,
    with frequency theta**(-4k/d) for pair k within each axis block.
    """

    head_dim: int
    theta: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_dim <= 0 or self.head_dim % 4:
            raise ValueError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")
        if self.theta <= 1.0:
            raise ValueError(f"theta must exceed 1, got {self.theta}")

    def frequencies(self, dtype=torch.float32, device=None) -> Tensor:
        k = torch.arange(self.head_dim // 4, dtype=dtype, device=device)
        return self.theta ** (-4.0 * k / self.head_dim)


def rope_angles(positions: Tensor, basis: RotaryBasis) -> Tensor:
    """Rotation angles for ``(..., 2)`` unified positions, ``(..., head_dim/2)``."""
    if positions.shape[-1] != 2:
        raise ValueError(f"positions must end in an (i, j) pair, got shape {tuple(positions.shape)}")
    freqs = basis.frequencies(dtype=positions.dtype, device=positions.device)
    return torch.cat(
        [positions[..., 0:1] * freqs, positions[..., 1:2] * freqs], dim=-1
    )


def rope_cos_sin(
    positions: Tensor,
    basis: RotaryBasis,
    non_spatial: Optional[Tensor] = None,
    dtype=torch.float32,
    device=None,
) -> tuple[Tensor, Tensor]:
    """Cos/sin tables for :func:`rotate_pairs`.

    ``non_spatial`` flags token rows (broadcast against positions' leading
    dims) whose angles are forced to zero, leaving them unrotated.
    """
    angles = rope_angles(positions.to(device=device, dtype=dtype), basis)
    if non_spatial is not None:
        angles = torch.where(non_spatial.to(angles.device)[..., None], torch.zeros_like(angles), angles)
    return angles.cos(), angles.sin()


def rotate_pairs(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate interleaved channel pairs of ``(..., N, head_dim)`` by the given angles.

    Pair k is channels ``(2k, 2k+1)``; cos/sin carry one angle per pair and
    broadcast over leading dims.  Zero angles are an exact identity.
    """
    if x.shape[-1] != 2 * cos.shape[-1]:
        raise ValueError(
            f"token dim {x.shape[-1]} does not match {cos.shape[-1]} rotation pairs"
        )
    if x.shape[-2] != cos.shape[-2]:
        raise ValueError(
            f"token count {x.shape[-2]} does not match rotation table rows {cos.shape[-2]}"
        )
    a = x[..., 0::2]
    b = x[..., 1::2]
    return torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1).flatten(-2)
