"""Linear-trajectory algebra, prediction parameterizations, and training losses.

The trajectory runs from pure noise at t = 0 to clean data at t = 1:
``z_t = t*x0 + (1 - t)*eps`` with constant true velocity ``x0 - eps``.
Models either predict the velocity directly (``v_pred``) or predict the clean
endpoint (``x_pred``), which converts through ``(x - z_t) / (1 - t)`` away
from the t = 1 singularity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

from .config import ConfigError


class SingularityError(ValueError):
    """Velocity conversion requested too close to the t = 1 endpoint."""


def _broadcast_t(t: Tensor | float, like: Tensor) -> Tensor:
    """Shape scalar or per-sample t for elementwise use against ``like``."""
    if not isinstance(t, Tensor):
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    t = t.to(dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    if t.ndim == 1 and t.shape[0] == like.shape[0]:
        return t.reshape(-1, *([1] * (like.ndim - 1)))
    if t.shape == like.shape or t.ndim == like.ndim:
        return t
    raise ValueError(
        f"time shape {tuple(t.shape)} does not broadcast against {tuple(like.shape)}"
    )


def interpolate(x0: Tensor, eps: Tensor, t: Tensor | float) -> Tensor:
    """Point on the noise->data line: ``t*x0 + (1 - t)*eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    tt = _broadcast_t(t, x0)
    return tt * x0 + (1.0 - tt) * eps


def target_velocity(x0: Tensor, eps: Tensor) -> Tensor:
    """Constant true velocity of the linear trajectory."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    return x0 - eps


def fm_loss(v_pred: Tensor, x0: Tensor, eps: Tensor) -> Tensor:
    """Mean squared error between predicted and true velocity."""
    if v_pred.shape != x0.shape:
        raise ValueError(
            f"prediction shape {tuple(v_pred.shape)} != data shape {tuple(x0.shape)}"
        )
    return ((v_pred - target_velocity(x0, eps)) ** 2).mean()


def xpred_to_velocity(
    x_pred: Tensor, z_t: Tensor, t: Tensor | float, t_guard: float = 1e-3
) -> Tensor:
    """Convert a clean-endpoint prediction to a velocity: ``(x - z_t)/(1 - t)``.

    Raises :class:`SingularityError` if any time lands within ``t_guard`` of
    the singular endpoint (``1 - t < t_guard``).
    """
    if x_pred.shape != z_t.shape:
        raise ValueError(
            f"prediction shape {tuple(x_pred.shape)} != state shape {tuple(z_t.shape)}"
        )
    if t_guard <= 0:
        raise ValueError(f"t_guard must be positive, got {t_guard}")
    tt = _broadcast_t(t, z_t)
    remaining = 1.0 - tt
    if (remaining < t_guard).any():
        worst = float(tt.max())
        raise SingularityError(
            f"velocity conversion at t = {worst:.6g} is inside the guard band "
            f"(1 - t < {t_guard:g})"
        )
    return (x_pred - z_t) / remaining


@dataclass(frozen=True)
class FreqWeightProfile:
    """Non-negative per-frequency weights for the spectral residual loss."""

    weights: Tensor

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ValueError(
                f"profile must be a 2D (H, W) weight map, got shape {tuple(self.weights.shape)}"
            )
        if (self.weights < 0).any():
            raise ValueError("profile weights must be non-negative")

    @classmethod
    def uniform(cls, height: int, width: int, dtype=torch.float32) -> "FreqWeightProfile":
        return cls(torch.ones(height, width, dtype=dtype))


def freq_fm_loss(
    v_pred: Tensor, v_target: Tensor, profile: Optional[FreqWeightProfile] = None
) -> Tensor:
    """Frequency-weighted residual energy under an orthonormal 2D DFT.

    Per channel: ``sum_freq w(f) |F(v_pred - v_target)(f)|^2 / (H*W)``,
    averaged over batch and channels.  With uniform (or absent) weights this
    equals :func:`fm_loss` by Parseval.
    """
    if v_pred.shape != v_target.shape:
        raise ValueError(
            f"prediction shape {tuple(v_pred.shape)} != target shape {tuple(v_target.shape)}"
        )
    if v_pred.ndim < 2:
        raise ValueError(f"need at least (H, W) dims, got shape {tuple(v_pred.shape)}")
    height, width = v_pred.shape[-2:]
    residual = v_pred - v_target
    spectrum = torch.fft.fft2(residual, norm="ortho")
    power = spectrum.real**2 + spectrum.imag**2
    if profile is not None:
        w = profile.weights
        if w.shape[-2:] != (height, width):
            raise ValueError(
                f"profile shape {tuple(w.shape)} does not match spatial dims "
                f"({height}, {width})"
            )
        power = power * w.to(dtype=power.dtype, device=power.device)
    return (power.sum(dim=(-2, -1)) / (height * width)).mean()


def repa_loss(
    registers: Tensor,
    vfm_tokens: Tensor,
    proj: Optional[Callable[[Tensor], Tensor]] = None,
) -> Tensor:
    """One minus the mean cosine between projected registers and feature tokens.

    Shapes must agree token-for-token after projection; zero-norm vectors on
    either side are rejected rather than silently clamped.
    """
    x = proj(registers) if proj is not None else registers
    if x.shape[:-1] != vfm_tokens.shape[:-1]:
        raise ValueError(
            f"register token layout {tuple(x.shape[:-1])} does not match feature "
            f"token layout {tuple(vfm_tokens.shape[:-1])}"
        )
    if x.shape[-1] != vfm_tokens.shape[-1]:
        raise ValueError(
            f"projected register width {x.shape[-1]} != feature width {vfm_tokens.shape[-1]}"
        )
    y = vfm_tokens.to(dtype=x.dtype, device=x.device)
    x_norm = x.norm(dim=-1)
    y_norm = y.norm(dim=-1)
    if (x_norm == 0).any() or (y_norm == 0).any():
        raise ValueError("cosine alignment is undefined for zero-norm tokens")
    cosine = (x * y).sum(dim=-1) / (x_norm * y_norm)
    return 1.0 - cosine.mean()


@dataclass(frozen=True)
class LossWeights:
    lambda_freq: float = 1.0
    lambda_repa: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda_freq < 0 or self.lambda_repa < 0:
            raise ConfigError("loss weights must be non-negative")


def total_loss(
    fm: Tensor,
    freq: Tensor | float = 0.0,
    repa: Tensor | float = 0.0,
    weights: LossWeights = LossWeights(),
) -> Tensor:
    return fm + weights.lambda_freq * freq + weights.lambda_repa * repa


def sample_time(
    n: int,
    rng: torch.Generator | None = None,
    sampler: str = "lognorm",
    dtype=torch.float32,
) -> Tensor:
    """Draw n training times in the open interval (0, 1).

    ``lognorm`` squashes a standard normal through a sigmoid (mass
    concentrated mid-trajectory); ``uniform`` is flat.
    """
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    if sampler == "lognorm":
        t = torch.sigmoid(torch.randn(n, generator=rng, dtype=dtype))
    elif sampler == "uniform":
        t = torch.rand(n, generator=rng, dtype=dtype)
    else:
        raise ConfigError(f"unknown time sampler {sampler!r}")
    eps = 1e-6
    return t.clamp(min=eps, max=1.0 - eps)
