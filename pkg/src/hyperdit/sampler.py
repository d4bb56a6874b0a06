"""ODE integration of the learned velocity with interval-gated guidance.

Integration runs on a uniform grid from t = 0 (noise) toward t = 1 (data).
For ``x_pred`` models the grid stops at ``1 - t_guard`` so no evaluation ever
lands inside the conversion guard band; any step whose lookahead would cross
it falls back from Heun to Euler, which never evaluates beyond the current
time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from .config import CfgPolicy, ConfigError, SamplerConfig

VelocityField = Callable[[Tensor, float], Tensor]


def cfg_velocity(v_uncond: Tensor, v_cond: Tensor, policy: CfgPolicy, t: float) -> Tensor:
    """Guided velocity; exactly ``v_cond`` at w = 1 or outside [t_min, t_max]."""
    if v_uncond.shape != v_cond.shape:
        raise ValueError(
            f"branch shapes differ: {tuple(v_uncond.shape)} vs {tuple(v_cond.shape)}"
        )
    policy.validate()
    if policy.w == 1.0 or not policy.active(t):
        return v_cond
    return v_uncond + policy.w * (v_cond - v_uncond)


def euler_step(z: Tensor, t: float, dt: float, field: VelocityField) -> Tensor:
    return z + dt * field(z, t)


def heun_step(z: Tensor, t: float, dt: float, field: VelocityField) -> Tensor:
    """One second-order step: average of left and lookahead derivatives."""
    k1 = field(z, t)
    k2 = field(z + dt * k1, t + dt)
    return z + dt * 0.5 * (k1 + k2)


def integrate(
    field: VelocityField,
    z0: Tensor,
    steps: int,
    method: str = "heun",
    t_end: float = 1.0,
    lookahead_limit: float | None = None,
) -> Tensor:
    """March z from t = 0 to ``t_end`` in ``steps`` uniform steps.

    ``lookahead_limit`` bounds the times the field may be evaluated at
    (exclusive); a Heun step whose lookahead would reach it is taken with
    Euler instead, which only evaluates at the current time.
    """
    if steps <= 0:
        raise ConfigError(f"sampler.steps must be positive, got {steps}")
    if method not in ("heun", "euler"):
        raise ConfigError(f"sampler.method must be 'heun' or 'euler', got {method!r}")
    z = z0
    for i in range(steps):
        t = t_end * i / steps
        t_next = t_end * (i + 1) / steps
        dt = t_next - t
        use_heun = method == "heun"
        if use_heun and lookahead_limit is not None and t_next >= lookahead_limit:
            use_heun = False
        z = heun_step(z, t, dt, field) if use_heun else euler_step(z, t, dt, field)
    return z


class GuidedVelocity:
    """Velocity oracle around a model: runs the conditional pass always and
    the unconditional pass only where guidance is live.  Counts every model
    forward as one NFE."""

    def __init__(self, model, labels: Tensor, policy: CfgPolicy):
        policy.validate()
        self.model = model
        self.labels = labels
        self.null_labels = torch.full_like(labels, model.null_class)
        self.policy = policy
        self.nfe = 0

    def __call__(self, z: Tensor, t: float) -> Tensor:
        tt = torch.full((z.shape[0],), t, dtype=z.dtype, device=z.device)
        v_cond = self.model.velocity(z, tt, self.labels)
        self.nfe += 1
        if self.policy.w == 1.0 or not self.policy.active(t):
            return v_cond
        v_uncond = self.model.velocity(z, tt, self.null_labels)
        self.nfe += 1
        return cfg_velocity(v_uncond, v_cond, self.policy, t)


@dataclass
class SampleResult:
    images: Tensor
    nfe: int


def sample(
    model,
    labels: Tensor,
    policy: CfgPolicy,
    sampler: SamplerConfig,
    rng: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> SampleResult:
    """Draw images for ``labels`` by integrating the model's velocity field.

    ``noise`` overrides the seeded initial draw (for replay tests).  The
    sampler config must agree with the model's parameterization; a mismatch
    is a configuration error, not a silent reinterpretation.
    """
    sampler.validate()
    config = model.config
    if sampler.parameterization != config.parameterization:
        raise ConfigError(
            f"sampler.parameterization = {sampler.parameterization!r} does not match "
            f"the model's parameterization = {config.parameterization!r}"
        )
    if labels.ndim != 1 or labels.numel() == 0:
        raise ValueError(f"expected a non-empty (B,) label vector, got {tuple(labels.shape)}")

    shape = (labels.shape[0], config.img_channels, config.img_size, config.img_size)
    if noise is None:
        device = next(model.parameters()).device if hasattr(model, "parameters") else "cpu"
        noise = torch.randn(shape, generator=rng, device=device)
    elif noise.shape != shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match {shape}")

    x_pred = sampler.parameterization == "x_pred"
    t_end = 1.0 - sampler.t_guard if x_pred else 1.0
    lookahead = t_end if x_pred else None
    field = GuidedVelocity(model, labels, policy)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            z = integrate(field, noise, sampler.steps, sampler.method, t_end, lookahead)
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    return SampleResult(images=z, nfe=field.nfe)
