"""Desk-scale dual-stream pixel-space diffusion transformer.

A coarse-patch semantics stream and a small-patch fine stream share one
rotary coordinate system; gated cross-attention connectors carry semantic
anchors into the fine stream, and flow matching trains the whole stack
end-to-end in pixel space.
"""

from .backbone import AnchorSet, SemanticsFlow, count_parameters
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import (
    CfgPolicy,
    ConfigError,
    ModelConfig,
    RunConfig,
    SamplerConfig,
    TrainConfig,
    load_config,
    parse_config_text,
    save_config,
)
from .connector import FineGrainedFlow, HyperConnector
from .data import SyntheticDataset, generate_synthetic_dataset, load_dataset, save_dataset
from .evaluation import (
    GaussianStats,
    cfg_sweep,
    feature_stats,
    frechet_distance,
    pca_feature_viz,
    toy_fid,
)
from .flow_matching import (
    FreqWeightProfile,
    LossWeights,
    SingularityError,
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
from .patching import PatchGrid, TokenSequence, patchify, unpatchify
from .rope import (
    RotaryBasis,
    compute_base_patch,
    rope_cos_sin,
    rotate_pairs,
    unified_grid,
    unified_index,
)
from .sampler import SampleResult, cfg_velocity, euler_step, heun_step, integrate, sample
from .trainer import (
    FileFeatureProvider,
    MockFeatureProvider,
    Trainer,
    TrainState,
    build_model,
    init_train_state,
    load_checkpoint,
    save_checkpoint,
    train_step,
    warmup_lr,
)
from .vfm import FeatureFile, FeatureFileError, load_features, mock_features, pool_tokens

__version__ = "0.1.0"
