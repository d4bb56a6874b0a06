"""Desk-scale generation metrics and diagnostic renderings.

The distribution metric is the Fréchet distance between Gaussian fits of
feature populations, computed in float64 through symmetric
eigendecompositions (no iterative matrix-root solvers), with small negative
eigenvalues clamped and genuinely indefinite inputs rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor

from .config import CfgPolicy, ConfigError, SamplerConfig
from .patching import PatchGrid, TokenSequence
from .sampler import sample
from .vfm import mock_feature_batch


@dataclass(frozen=True)
class GaussianStats:
    """Mean and unbiased covariance of one feature population."""

    mean: Tensor
    cov: Tensor
    count: int

    def __post_init__(self) -> None:
        if self.mean.ndim != 1:
            raise ValueError(f"mean must be 1D, got shape {tuple(self.mean.shape)}")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(
                f"cov shape {tuple(self.cov.shape)} does not match mean dim {d}"
            )


def feature_stats(features: Tensor) -> GaussianStats:
    if features.ndim != 2:
        raise ValueError(f"expected (N, D) features, got shape {tuple(features.shape)}")
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {n}")
    x = features.to(torch.float64)
    mean = x.mean(dim=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mean=mean, cov=cov, count=n)


def _psd_root(matrix: Tensor, rel_tol: float = 1e-8) -> Tensor:
    """Symmetric square root via eigendecomposition; rejects indefinite input."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = torch.linalg.eigh(sym)
    scale = float(vals.abs().max()) if vals.numel() else 0.0
    floor = -rel_tol * max(scale, 1.0)
    if float(vals.min()) < floor:
        raise ValueError(
            f"matrix is not positive semi-definite (min eigenvalue {float(vals.min()):.3e})"
        )
    return (vecs * vals.clamp(min=0.0).sqrt()) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats, rel_tol: float = 1e-8) -> float:
    """Fréchet distance between two Gaussian fits.

    ``|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2)``, with the
    inner root taken through eigh of the symmetrized product.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(
            f"feature dims differ: {a.mean.shape[0]} vs {b.mean.shape[0]}"
        )
    ca = a.cov.to(torch.float64)
    cb = b.cov.to(torch.float64)
    root_a = _psd_root(ca, rel_tol)
    product = root_a @ cb @ root_a
    vals = torch.linalg.eigvalsh(0.5 * (product + product.T))
    scale = float(vals.abs().max()) if vals.numel() else 0.0
    floor = -rel_tol * max(scale, 1.0)
    if float(vals.min()) < floor:
        raise ValueError(
            f"covariance product is not positive semi-definite "
            f"(min eigenvalue {float(vals.min()):.3e})"
        )
    trace_root = float(vals.clamp(min=0.0).sqrt().sum())
    diff = (a.mean - b.mean).to(torch.float64)
    value = float(diff @ diff + ca.trace() + cb.trace() - 2.0 * trace_root)
    # Exact-zero distance can round slightly negative; snap it back.
    return max(value, 0.0)


def image_features(images: Tensor, token_count: int = 16, dim: int = 32, seed: int = 0) -> Tensor:
    """Per-image feature vectors for toy-FID: mean over mock feature tokens."""
    return mock_feature_batch(images, token_count, dim, seed).mean(dim=1)


def toy_fid(
    generated: Tensor,
    reference: Tensor | GaussianStats,
    token_count: int = 16,
    dim: int = 32,
    seed: int = 0,
) -> float:
    gen_stats = feature_stats(image_features(generated, token_count, dim, seed))
    if isinstance(reference, GaussianStats):
        ref_stats = reference
    else:
        ref_stats = feature_stats(image_features(reference, token_count, dim, seed))
    return frechet_distance(gen_stats, ref_stats)


# ---------------------------------------------------------------------------
# nearest-centroid oracle

def class_centroids(images: Tensor, labels: Tensor, num_classes: int) -> Tensor:
    """Per-class mean images, ``(num_classes, C, H, W)``."""
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels disagree on sample count")
    centroids = []
    for c in range(num_classes):
        mask = labels == c
        if not mask.any():
            raise ValueError(f"no samples for class {c}")
        centroids.append(images[mask].mean(dim=0))
    return torch.stack(centroids)


def nearest_centroid_classify(images: Tensor, centroids: Tensor) -> Tensor:
    flat = images.reshape(images.shape[0], -1)
    refs = centroids.reshape(centroids.shape[0], -1)
    dists = torch.cdist(flat.unsqueeze(0), refs.unsqueeze(0)).squeeze(0)
    return dists.argmin(dim=1)


def nearest_centroid_accuracy(images: Tensor, labels: Tensor, centroids: Tensor) -> float:
    pred = nearest_centroid_classify(images, centroids)
    return float((pred == labels).float().mean())


# ---------------------------------------------------------------------------
# feature visualization

def pca_feature_viz(tokens: TokenSequence | Tensor, grid: Optional[PatchGrid] = None) -> Tensor:
    """Project per-token features onto their top-3 PCs as an RGB raster.

    Each channel is min-max normalized independently to [0, 1]; missing
    components (feature rank < 3) render as flat zero channels.  Output shape
    is ``(rows, cols, 3)``.
    """
    if isinstance(tokens, TokenSequence):
        if grid is None:
            grid = tokens.grid
        data = tokens.tokens
    else:
        data = tokens
    if grid is None:
        raise ValueError("pca_feature_viz needs the token grid to shape its raster")
    if data.ndim != 2:
        raise ValueError(f"expected (N, D) tokens, got shape {tuple(data.shape)}")
    if data.shape[0] != grid.num_patches:
        raise ValueError(
            f"token count {data.shape[0]} does not match grid "
            f"{grid.rows}x{grid.cols}"
        )
    x = data.to(torch.float64)
    x = x - x.mean(dim=0)
    # Economy SVD: right singular vectors are the principal axes.
    _, singular, vt = torch.linalg.svd(x, full_matrices=False)
    out = torch.zeros(grid.num_patches, 3, dtype=torch.float64)
    if singular.numel():
        cutoff = 1e-8 * float(singular[0])
        rank = int((singular > cutoff).sum()) if float(singular[0]) > 0 else 0
        for c in range(min(3, rank)):
            axis = vt[c]
            # Deterministic sign: largest-magnitude loading points positive.
            pivot = int(axis.abs().argmax())
            if axis[pivot] < 0:
                axis = -axis
            proj = x @ axis
            lo, hi = float(proj.min()), float(proj.max())
            if hi > lo:
                out[:, c] = (proj - lo) / (hi - lo)
    return out.reshape(grid.rows, grid.cols, 3).to(torch.float32)


# ---------------------------------------------------------------------------
# guidance sweep

@dataclass
class SweepRow:
    w: float
    fid: float


def cfg_sweep(
    model,
    scales: Sequence[float],
    reference: GaussianStats,
    sampler: SamplerConfig,
    num_samples: int,
    seed: int = 0,
    t_min: float = 0.1,
    t_max: float = 1.0,
    batch: int = 64,
    feature_fn: Optional[Callable[[Tensor], Tensor]] = None,
) -> list[SweepRow]:
    """Toy-FID at each guidance scale, same seed per scale (isolates w).

    Labels cycle through all classes; ``feature_fn`` defaults to the mock
    image features.
    """
    if not scales:
        raise ConfigError("cfg sweep needs at least one guidance scale")
    if num_samples <= 0:
        raise ConfigError(f"cfg sweep needs a positive sample count, got {num_samples}")
    if feature_fn is None:
        feature_fn = image_features
    num_classes = model.config.num_classes
    rows = []
    for w in scales:
        policy = CfgPolicy(w=float(w), t_min=t_min, t_max=t_max)
        policy.validate()
        rng = torch.Generator().manual_seed(seed)
        chunks = []
        done = 0
        while done < num_samples:
            take = min(batch, num_samples - done)
            labels = torch.arange(done, done + take) % num_classes
            result = sample(model, labels, policy, sampler, rng=rng)
            chunks.append(result.images)
            done += take
        feats = feature_fn(torch.cat(chunks))
        rows.append(SweepRow(w=float(w), fid=frechet_distance(feature_stats(feats), reference)))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = ["cfg_w\ttoy_fid"]
    lines += [f"{row.w:g}\t{row.fid:.6f}" for row in rows]
    best = min(rows, key=lambda r: r.fid)
    lines.append(f"# best\t{best.w:g}")
    return "\n".join(lines) + "\n"
