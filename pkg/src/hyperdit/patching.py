"""Image <-> token-sequence conversion at a configurable patch size.

Tokens are emitted in raster order (row-major over the patch grid), and each
token is one flattened patch laid out channel-major: ``(C, p, p) -> C*p*p``.
With no embedding callables the two directions are exact inverses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Raster-ordered patch layout of an image at one patch size."""

    patch: int
    rows: int
    cols: int

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch

    @property
    def width(self) -> int:
        return self.cols * self.patch

    @classmethod
    def for_image(cls, height: int, width: int, patch: int) -> "PatchGrid":
        if patch <= 0:
            raise ValueError(f"patch size must be positive, got {patch}")
        if height <= 0 or width <= 0:
            raise ValueError(f"image size must be positive, got {height}x{width}")
        if height % patch or width % patch:
            raise ValueError(
                f"patch size {patch} does not divide image size {height}x{width}"
            )
        return cls(patch=patch, rows=height // patch, cols=width // patch)

    def grid_indices(self, device=None) -> Tensor:
        """Integer ``(i, j)`` pairs for every patch, raster order, shape (N, 2)."""
        ii = torch.arange(self.rows, device=device).repeat_interleave(self.cols)
        jj = torch.arange(self.cols, device=device).repeat(self.rows)
        return torch.stack([ii, jj], dim=-1)


@dataclass
class TokenSequence:
    """A batch of tokens plus the spatial layout they came from.

    ``grid`` is None for sequences with no spatial positions (register
    tokens); then ``positions`` is None too and rotary application must skip
    the rows.
    """

    tokens: Tensor
    grid: Optional[PatchGrid] = None

    @property
    def scale(self) -> Optional[int]:
        return None if self.grid is None else self.grid.patch

    @property
    def positions(self) -> Optional[Tensor]:
        return None if self.grid is None else self.grid.grid_indices(self.tokens.device)

    def __len__(self) -> int:
        return self.tokens.shape[-2]


def patchify(
    image: Tensor,
    patch: int,
    embed: Callable[[Tensor], Tensor] | None = None,
) -> TokenSequence:
    """Split ``(..., C, H, W)`` pixels into raster-ordered flattened patches.

    ``embed``, when given, maps the raw ``(..., N, C*p*p)`` tokens to model
    width; identity otherwise.
    """
    if image.ndim < 3:
        raise ValueError(f"expected (..., C, H, W) input, got shape {tuple(image.shape)}")
    channels, height, width = image.shape[-3:]
    grid = PatchGrid.for_image(height, width, patch)
    lead = image.shape[:-3]
    x = image.reshape(-1, channels, grid.rows, patch, grid.cols, patch)
    x = x.permute(0, 2, 4, 1, 3, 5)
    tokens = x.reshape(*lead, grid.num_patches, channels * patch * patch)
    if embed is not None:
        tokens = embed(tokens)
    return TokenSequence(tokens=tokens, grid=grid)


def unpatchify(
    tokens: TokenSequence | Tensor,
    grid: PatchGrid | None = None,
    project: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Reassemble raster-ordered patch tokens into ``(..., C, H, W)`` pixels.

    ``project``, when given, maps tokens back to ``C*p*p`` patch values first.
    """
    if isinstance(tokens, TokenSequence):
        if grid is None:
            grid = tokens.grid
        data = tokens.tokens
    else:
        data = tokens
    if grid is None:
        raise ValueError("unpatchify needs a PatchGrid to reassemble against")
    if project is not None:
        data = project(data)
    if data.ndim < 2:
        raise ValueError(f"expected (..., N, D) tokens, got shape {tuple(data.shape)}")
    *lead, count, dim = data.shape
    if count != grid.num_patches:
        raise ValueError(
            f"token count {count} does not match grid {grid.rows}x{grid.cols} "
            f"({grid.num_patches} patches)"
        )
    p = grid.patch
    if dim % (p * p):
        raise ValueError(f"token dim {dim} is not a multiple of patch area {p * p}")
    channels = dim // (p * p)
    x = data.reshape(-1, grid.rows, grid.cols, channels, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(*lead, channels, grid.height, grid.width)
