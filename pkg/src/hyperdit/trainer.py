"""Flow-matching training loop: warmup schedule, EMA, and exact resume.

All stochastic draws inside training (time, noise, label dropout, epoch
shuffles) flow through one ``torch.Generator`` owned by the train state, in a
fixed order per step, so checkpoint + resume replays the identical stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import torch
from torch import Tensor

from . import checkpoint as ckpt
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig
from .data import SyntheticDataset
from .flow_matching import (
    FreqWeightProfile,
    LossWeights,
    fm_loss,
    freq_fm_loss,
    interpolate,
    repa_loss,
    sample_time,
    target_velocity,
    total_loss,
    xpred_to_velocity,
)
from .model import HyperDiT
from .vfm import FeatureFile, mock_feature_batch, pool_tokens


class FeatureProvider(Protocol):
    token_count: int
    dim: int

    def features_for(self, indices: Tensor, images: Tensor) -> Tensor: ...


@dataclass
class MockFeatureProvider:
    """On-the-fly pooled-projection features; no file needed."""

    token_count: int
    dim: int
    seed: int = 0

    def features_for(self, indices: Tensor, images: Tensor) -> Tensor:
        return mock_feature_batch(images, self.token_count, self.dim, self.seed)


class FileFeatureProvider:
    """Looks records up in a loaded FeatureFile by dataset index (id = str(i))."""

    def __init__(self, features: FeatureFile):
        self.features = features
        self.token_count = features.token_count
        self.dim = features.dim

    def features_for(self, indices: Tensor, images: Tensor) -> Tensor:
        rows = []
        for i in indices.tolist():
            key = str(i)
            if key not in self.features.records:
                raise KeyError(f"feature file has no record for dataset index {key!r}")
            rows.append(self.features[key])
        return torch.stack(rows)


def warmup_lr(step: int, lr: float, warmup_steps: int) -> float:
    """Linear ramp ``lr * step / warmup_steps``, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return lr
    return lr * step / warmup_steps


def ema_update_(ema: dict[str, Tensor], model: torch.nn.Module, decay: float) -> None:
    """In-place exponential blend of model parameters into the shadow dict."""
    with torch.no_grad():
        for name, param in model.named_parameters():
            ema[name].mul_(decay).add_(param.detach(), alpha=1.0 - decay)


def build_model(config: ModelConfig, seed: int) -> HyperDiT:
    """Construct a model with a seeded, reproducible initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HyperDiT(config)
    return model


@dataclass
class TrainState:
    model: HyperDiT
    optimizer: torch.optim.Adam
    ema: dict[str, Tensor]
    rng: torch.Generator
    step: int = 0


def init_train_state(run: RunConfig) -> TrainState:
    run.validate()
    model = build_model(run.model, run.train.seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=run.train.lr,
        betas=(run.train.adam_beta1, run.train.adam_beta2),
    )
    ema = {name: p.detach().clone() for name, p in model.named_parameters()}
    rng = torch.Generator().manual_seed(run.train.seed)
    return TrainState(model=model, optimizer=optimizer, ema=ema, rng=rng)


def load_ema_weights(model: HyperDiT, ema: dict[str, Tensor]) -> None:
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(ema[name])


def train_step(
    state: TrainState,
    images: Tensor,
    labels: Tensor,
    config: TrainConfig,
    features: Optional[FeatureProvider] = None,
    indices: Optional[Tensor] = None,
) -> dict[str, float]:
    """One optimizer step; returns scalar metrics for logging."""
    model = state.model
    model_config = model.config
    batch = images.shape[0]

    # Fixed draw order: time, noise, label dropout.
    t = sample_time(batch, state.rng, config.time_sampler, dtype=images.dtype)
    if model_config.parameterization == "x_pred":
        t = t.clamp(max=1.0 - model_config.t_guard)
    eps = torch.randn(images.shape, generator=state.rng, dtype=images.dtype)
    drop = torch.rand(batch, generator=state.rng) < config.label_dropout
    effective = torch.where(drop, torch.full_like(labels, model.null_class), labels)

    z_t = interpolate(images, eps, t)
    pred, anchors = model.forward_full(z_t, t, effective)
    if model_config.parameterization == "x_pred":
        v_pred = xpred_to_velocity(pred, z_t, t, model_config.t_guard)
    else:
        v_pred = pred
    v_target = target_velocity(images, eps)

    loss_fm = fm_loss(v_pred, images, eps)
    weights = LossWeights(config.lambda_freq, config.lambda_repa)
    if config.lambda_freq > 0:
        profile = FreqWeightProfile.uniform(images.shape[-2], images.shape[-1])
        loss_freq = freq_fm_loss(v_pred, v_target, profile)
    else:
        loss_freq = torch.zeros((), dtype=images.dtype)

    if config.lambda_repa > 0 and features is not None:
        if model.repa_head is None:
            raise ConfigError(
                "train.lambda_repa > 0 needs model.vfm_dim set so the model has "
                "an alignment head"
            )
        if features.dim != model_config.vfm_dim:
            raise ConfigError(
                f"feature width {features.dim} does not match model.vfm_dim "
                f"{model_config.vfm_dim}"
            )
        targets = features.features_for(
            indices if indices is not None else torch.arange(batch), images
        )
        n_reg = model_config.num_registers
        if targets.shape[1] != n_reg:
            if config.repa_pooling == "mean":
                targets = pool_tokens(targets, n_reg)
            else:
                raise ConfigError(
                    f"feature token count {targets.shape[1]} does not match "
                    f"model.num_registers = {n_reg}; set train.repa_pooling = mean "
                    "to pool on the grid"
                )
        loss_repa = repa_loss(anchors.registers, targets, model.repa_head)
    else:
        loss_repa = torch.zeros((), dtype=images.dtype)

    loss = total_loss(loss_fm, loss_freq, loss_repa, weights)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {state.step}: total={loss.detach()!r} "
            f"fm={loss_fm.detach()!r} freq={loss_freq.detach()!r} "
            f"repa={loss_repa.detach()!r}"
        )

    lr = warmup_lr(state.step, config.lr, config.warmup_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip > 0:
        grad_norm = float(
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        )
    else:
        norms = [p.grad.norm() for p in model.parameters() if p.grad is not None]
        grad_norm = float(torch.stack(norms).norm()) if norms else 0.0
    state.optimizer.step()
    ema_update_(state.ema, model, config.ema_decay)
    state.step += 1

    return {
        "step": state.step,
        "lr": lr,
        "loss": float(loss.detach()),
        "loss_fm": float(loss_fm.detach()),
        "loss_freq": float(loss_freq.detach()),
        "loss_repa": float(loss_repa.detach()),
        "grad_norm": grad_norm,
        "dropped_labels": int(drop.sum()),
    }


def save_checkpoint(path: str, state: TrainState) -> None:
    tensors: dict[str, Tensor] = {}
    for name, param in state.model.named_parameters():
        tensors[f"model.{name}"] = param
    for name, value in state.ema.items():
        tensors[f"ema.{name}"] = value
    for name, param in state.model.named_parameters():
        slot = state.optimizer.state.get(param)
        if slot:
            tensors[f"opt.{name}.step"] = torch.as_tensor(slot["step"], dtype=torch.float32)
            tensors[f"opt.{name}.exp_avg"] = slot["exp_avg"]
            tensors[f"opt.{name}.exp_avg_sq"] = slot["exp_avg_sq"]
    tensors["meta.step"] = torch.tensor(float(state.step))
    tensors["meta.rng"] = ckpt.encode_rng_state(state.rng.get_state())
    ckpt.write_checkpoint(path, state.model.config, tensors)


def load_checkpoint(path: str, run: RunConfig) -> TrainState:
    """Rebuild a full train state; the run's model section must match the file."""
    loaded_config, tensors = ckpt.read_checkpoint(path)
    ckpt.check_config_matches(loaded_config, run.model)
    model = HyperDiT(loaded_config)
    with torch.no_grad():
        for name, param in model.named_parameters():
            key = f"model.{name}"
            if key not in tensors:
                raise ckpt.CheckpointError(f"checkpoint is missing tensor {key!r}")
            if tensors[key].shape != param.shape:
                raise ckpt.CheckpointError(
                    f"tensor {key!r} has shape {tuple(tensors[key].shape)}, "
                    f"model expects {tuple(param.shape)}"
                )
            param.copy_(tensors[key])
    ema = {}
    for name, param in model.named_parameters():
        key = f"ema.{name}"
        if key not in tensors:
            raise ckpt.CheckpointError(f"checkpoint is missing tensor {key!r}")
        ema[name] = tensors[key].clone()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=run.train.lr,
        betas=(run.train.adam_beta1, run.train.adam_beta2),
    )
    for name, param in model.named_parameters():
        key = f"opt.{name}.exp_avg"
        if key in tensors:
            optimizer.state[param] = {
                "step": tensors[f"opt.{name}.step"].reshape(()).clone(),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"opt.{name}.exp_avg_sq"].clone(),
            }
    rng = torch.Generator()
    if "meta.rng" in tensors:
        rng.set_state(ckpt.decode_rng_state(tensors["meta.rng"]))
    step = int(tensors["meta.step"].item()) if "meta.step" in tensors else 0
    return TrainState(model=model, optimizer=optimizer, ema=ema, rng=rng, step=step)


@dataclass
class Trainer:
    """Epoch/batch orchestration over an in-memory dataset."""

    run: RunConfig
    dataset: SyntheticDataset
    features: Optional[FeatureProvider] = None
    state: TrainState = None  # type: ignore[assignment]
    history: list[dict[str, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.run.validate()
        if self.state is None:
            self.state = init_train_state(self.run)
        if self.run.train.batch > len(self.dataset):
            raise ConfigError(
                f"train.batch = {self.run.train.batch} exceeds dataset size "
                f"{len(self.dataset)}"
            )

    @property
    def total_steps(self) -> int:
        per_epoch = len(self.dataset) // self.run.train.batch
        steps = self.run.train.epochs * per_epoch
        if self.run.train.max_steps:
            steps = min(steps, self.run.train.max_steps)
        return steps

    def train(self, log_every: int = 0) -> list[dict[str, float]]:
        """Run to the configured step budget (resume-aware).

        Batches are sampled with replacement each step from the state's
        generator, so the only loop state is (rng, step) and a resumed run
        replays the identical batch stream from any checkpoint.
        """
        config = self.run.train
        n = len(self.dataset)
        while self.state.step < self.total_steps:
            indices = torch.randint(0, n, (config.batch,), generator=self.state.rng)
            metrics = train_step(
                self.state,
                self.dataset.images[indices],
                self.dataset.labels[indices],
                config,
                self.features,
                indices,
            )
            self.history.append(metrics)
            if log_every and metrics["step"] % log_every == 0:
                print(
                    f"step {metrics['step']:>6}  loss {metrics['loss']:.4f}  "
                    f"fm {metrics['loss_fm']:.4f}  repa {metrics['loss_repa']:.4f}  "
                    f"lr {metrics['lr']:.2e}",
                    flush=True,
                )
        return self.history
