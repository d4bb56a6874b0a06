"""Configuration types, presets, and the line-oriented run-config text format.

A run config is a flat list of ``dotted.path = value`` lines.  Blank lines and
``#`` comments are ignored.  The file must carry a ``schema_version`` field so
old configs fail loudly instead of being silently misread.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field, fields

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent configuration.  Messages name the offending field."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the two-stream generator."""

    img_size: int = 32
    img_channels: int = 3
    patch_large: int = 8
    patch_small: int = 4
    # Unit of the shared positional grid.  None means "derive from the image
    # size and the two patch scales"; set explicitly to override.
    base_patch: int | None = None
    hidden_dim: int = 128
    dit_blocks: int = 4
    num_connectors: int = 2
    num_heads: int = 4
    num_registers: int = 16
    num_classes: int = 4
    mlp_ratio: float = 4.0
    # Give each connector a gated MLP sublayer after its cross-attention.
    connector_mlp: bool = True
    # Whether register rows ride along in the anchor sequences handed to the
    # fine stream (they always feed the alignment head either way).
    anchors_include_registers: bool = True
    parameterization: str = "v_pred"
    rope_theta: float = 10000.0
    t_guard: float = 1e-3
    # Output width of the register alignment head; None disables the head.
    vfm_dim: int | None = 32

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def anchor_stride(self) -> int:
        """Blocks between consecutive anchor taps (m, with depth = m * n)."""
        return self.dit_blocks // self.num_connectors

    @property
    def patch_dim_large(self) -> int:
        return self.patch_large * self.patch_large * self.img_channels

    @property
    def patch_dim_small(self) -> int:
        return self.patch_small * self.patch_small * self.img_channels

    def validate(self) -> None:
        if self.img_size <= 0:
            raise ConfigError(f"model.img_size must be positive, got {self.img_size}")
        if self.img_channels <= 0:
            raise ConfigError(f"model.img_channels must be positive, got {self.img_channels}")
        for name in ("patch_large", "patch_small"):
            p = getattr(self, name)
            if p <= 0:
                raise ConfigError(f"model.{name} must be positive, got {p}")
            if self.img_size % p:
                raise ConfigError(
                    f"model.{name} = {p} must divide model.img_size = {self.img_size}"
                )
        if self.patch_small > self.patch_large:
            raise ConfigError(
                f"model.patch_small = {self.patch_small} must not exceed "
                f"model.patch_large = {self.patch_large}"
            )
        if self.patch_large % self.patch_small:
            raise ConfigError(
                f"model.patch_small = {self.patch_small} must divide "
                f"model.patch_large = {self.patch_large} so fine patches "
                "nest inside coarse ones"
            )
        if self.base_patch is not None and self.base_patch <= 0:
            raise ConfigError(f"model.base_patch must be positive, got {self.base_patch}")
        if self.hidden_dim <= 0 or self.num_heads <= 0:
            raise ConfigError("model.hidden_dim and model.num_heads must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"model.num_heads = {self.num_heads} must divide "
                f"model.hidden_dim = {self.hidden_dim}"
            )
        if self.head_dim % 4:
            raise ConfigError(
                "model.hidden_dim / model.num_heads must be divisible by 4 for "
                f"two-axis rotary pairs, got head dim {self.head_dim}"
            )
        if self.dit_blocks <= 0:
            raise ConfigError(f"model.dit_blocks must be positive, got {self.dit_blocks}")
        if self.num_connectors < 0:
            raise ConfigError(
                f"model.num_connectors must be non-negative, got {self.num_connectors}"
            )
        if self.num_connectors and self.dit_blocks % self.num_connectors:
            raise ConfigError(
                f"model.num_connectors = {self.num_connectors} must divide "
                f"model.dit_blocks = {self.dit_blocks} so anchors land on a "
                "uniform block stride"
            )
        if self.num_registers < 0:
            raise ConfigError(
                f"model.num_registers must be non-negative, got {self.num_registers}"
            )
        if self.num_classes <= 0:
            raise ConfigError(f"model.num_classes must be positive, got {self.num_classes}")
        if self.parameterization not in ("v_pred", "x_pred"):
            raise ConfigError(
                "model.parameterization must be 'v_pred' or 'x_pred', got "
                f"{self.parameterization!r}"
            )
        if self.rope_theta <= 1.0:
            raise ConfigError(f"model.rope_theta must exceed 1, got {self.rope_theta}")
        if not 0.0 < self.t_guard < 1.0:
            raise ConfigError(f"model.t_guard must lie in (0, 1), got {self.t_guard}")
        if self.vfm_dim is not None and self.vfm_dim <= 0:
            raise ConfigError(f"model.vfm_dim must be positive or none, got {self.vfm_dim}")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch: int = 32
    epochs: int = 10
    warmup_steps: int = 100
    label_dropout: float = 0.1
    lambda_freq: float = 1.0
    lambda_repa: float = 0.5
    freq_profile: str = "uniform"
    # Pairing rule when the feature token count K exceeds the register count:
    # "strict" errors out, "mean" pools K tokens down on a 2D grid.
    repa_pooling: str = "strict"
    time_sampler: str = "lognorm"
    ema_decay: float = 0.9999
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    # Optional hard cap on optimizer steps (0 = no cap) and periodic
    # checkpoint cadence in steps (0 = final checkpoint only).
    max_steps: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"train.lr must be non-negative, got {self.lr}")
        if self.batch <= 0:
            raise ConfigError(f"train.batch must be positive, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be non-negative, got {self.epochs}")
        if self.warmup_steps < 0:
            raise ConfigError(f"train.warmup_steps must be non-negative, got {self.warmup_steps}")
        if not 0.0 <= self.label_dropout <= 1.0:
            raise ConfigError(f"train.label_dropout must lie in [0, 1], got {self.label_dropout}")
        if self.lambda_freq < 0 or self.lambda_repa < 0:
            raise ConfigError("train.lambda_freq and train.lambda_repa must be non-negative")
        if self.freq_profile not in ("uniform",):
            raise ConfigError(f"train.freq_profile must be 'uniform', got {self.freq_profile!r}")
        if self.repa_pooling not in ("strict", "mean"):
            raise ConfigError(
                f"train.repa_pooling must be 'strict' or 'mean', got {self.repa_pooling!r}"
            )
        if self.time_sampler not in ("lognorm", "uniform"):
            raise ConfigError(
                f"train.time_sampler must be 'lognorm' or 'uniform', got {self.time_sampler!r}"
            )
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"train.ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.grad_clip < 0:
            raise ConfigError(f"train.grad_clip must be non-negative, got {self.grad_clip}")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.max_steps and train.checkpoint_every must be non-negative")


@dataclass
class SamplerConfig:
    steps: int = 50
    method: str = "heun"
    # Must agree with the model the sampler is driving; kept here so a run
    # config is self-describing and mismatches are caught, not guessed over.
    parameterization: str = "v_pred"
    t_guard: float = 1e-3

    def validate(self) -> None:
        if self.steps <= 0:
            raise ConfigError(f"sampler.steps must be positive, got {self.steps}")
        if self.method not in ("heun", "euler"):
            raise ConfigError(f"sampler.method must be 'heun' or 'euler', got {self.method!r}")
        if self.parameterization not in ("v_pred", "x_pred"):
            raise ConfigError(
                "sampler.parameterization must be 'v_pred' or 'x_pred', got "
                f"{self.parameterization!r}"
            )
        if not 0.0 <= self.t_guard < 1.0:
            raise ConfigError(f"sampler.t_guard must lie in [0, 1), got {self.t_guard}")


@dataclass
class CfgPolicy:
    """Classifier-free guidance strength and the time interval it applies on."""

    w: float = 1.0
    t_min: float = 0.1
    t_max: float = 1.0

    def validate(self) -> None:
        if self.w < 1.0:
            raise ConfigError(f"cfg.w must be >= 1, got {self.w}")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ConfigError(
                f"cfg.t_min/cfg.t_max must satisfy 0 <= t_min < t_max <= 1, "
                f"got [{self.t_min}, {self.t_max}]"
            )

    def active(self, t: float) -> bool:
        return self.t_min <= t <= self.t_max


@dataclass
class Paths:
    dataset: str = "dataset.npz"
    features: str = ""
    checkpoint: str = ""
    run_dir: str = "run"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    cfg: CfgPolicy = field(default_factory=CfgPolicy)
    paths: Paths = field(default_factory=Paths)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.sampler.validate()
        self.cfg.validate()
        if self.sampler.parameterization != self.model.parameterization:
            raise ConfigError(
                f"sampler.parameterization = {self.sampler.parameterization!r} does not "
                f"match model.parameterization = {self.model.parameterization!r}"
            )


# ---------------------------------------------------------------------------
# presets

def nano() -> RunConfig:
    """Desk-scale default: 32x32 images, 4 blocks, 2 connectors."""
    run = RunConfig()
    run.train.ema_decay = 0.99
    return run


def _imagenet_common(blocks: int, hidden: int, w: float) -> RunConfig:
    model = ModelConfig(
        img_size=256,
        patch_large=16,
        patch_small=8,
        hidden_dim=hidden,
        dit_blocks=blocks,
        num_connectors=4,
        num_heads=16,
        num_registers=256,
        num_classes=1000,
        vfm_dim=None,
    )
    train = TrainConfig(lr=5e-5, batch=1024, epochs=600, ema_decay=0.9999)
    return RunConfig(model=model, train=train, cfg=CfgPolicy(w=w))


def size_b() -> RunConfig:
    return _imagenet_common(blocks=8, hidden=768, w=3.2)


def size_xl() -> RunConfig:
    return _imagenet_common(blocks=24, hidden=1152, w=2.9)


def size_h() -> RunConfig:
    return _imagenet_common(blocks=28, hidden=1280, w=2.9)


PRESETS: dict[str, typing.Callable[[], RunConfig]] = {
    "nano": nano,
    "b": size_b,
    "xl": size_xl,
    "h": size_h,
}


# ---------------------------------------------------------------------------
# text format

_SECTIONS = ("model", "train", "sampler", "cfg", "paths")


def _coerce(raw: str, ftype: object, key: str):
    """Parse one raw string according to the target dataclass field type."""
    origin = typing.get_origin(ftype)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        args = [a for a in typing.get_args(ftype) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0], key)
    if ftype is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if ftype is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if ftype is float:
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
        if math.isnan(value) or math.isinf(value):
            raise ConfigError(f"{key}: value must be finite, got {raw!r}")
        return value
    return raw


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_flat(run: RunConfig) -> dict[str, str]:
    out: dict[str, str] = {"schema_version": str(SCHEMA_VERSION), "seed": str(run.seed)}
    for section in _SECTIONS:
        obj = getattr(run, section)
        for f in fields(obj):
            out[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    return out


def dump_config(run: RunConfig) -> str:
    lines = [f"{key} = {value}" for key, value in to_flat(run).items()]
    return "\n".join(lines) + "\n"


def apply_overrides(run: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Set dotted-path keys on a RunConfig from raw strings, with type checks."""
    for key, raw in overrides.items():
        if key == "schema_version":
            if raw.strip() != str(SCHEMA_VERSION):
                raise ConfigError(
                    f"schema_version: this build reads version {SCHEMA_VERSION}, "
                    f"file declares {raw.strip()!r}"
                )
            continue
        if key == "seed":
            run.seed = _coerce(raw, int, key)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(run, section)
        matching = [f for f in fields(obj) if f.name == name]
        if not matching:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = typing.get_type_hints(type(obj))[name]
        setattr(obj, name, _coerce(raw.strip(), ftype, key))
    return run


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse run-config text into a RunConfig.  Unknown keys are errors."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        entries[key.strip()] = raw.strip()
    if "schema_version" not in entries:
        raise ConfigError("config file is missing the schema_version field")
    run = base if base is not None else RunConfig()
    return apply_overrides(run, entries)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def save_config(run: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(run))


def clone(run: RunConfig) -> RunConfig:
    return dataclasses.replace(
        run,
        model=dataclasses.replace(run.model),
        train=dataclasses.replace(run.train),
        sampler=dataclasses.replace(run.sampler),
        cfg=dataclasses.replace(run.cfg),
        paths=dataclasses.replace(run.paths),
    )
