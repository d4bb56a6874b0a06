"""The full two-stream generator."""

from __future__ import annotations

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import AnchorSet, ConditionEmbedder, SemanticsFlow
from .config import ModelConfig
from .connector import FineGrainedFlow
from .flow_matching import xpred_to_velocity


class HyperDiT(nn.Module):
    """Dual-stream pixel diffusion transformer.

    A coarse-patch semantics stream produces multi-level anchor sequences; a
    small-patch fine stream cross-attends into them and renders the output
    raster.  Depending on ``config.parameterization`` the raw output is a
    velocity (``v_pred``) or a clean-image estimate (``x_pred``); use
    :meth:`velocity` when integrating.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.cond = ConditionEmbedder(config.hidden_dim, config.num_classes)
        self.semantics = SemanticsFlow(config)
        self.fine = FineGrainedFlow(config)
        if config.vfm_dim is not None:
            width = config.hidden_dim
            self.repa_head = nn.Sequential(
                nn.Linear(width, width),
                nn.SiLU(),
                nn.Linear(width, width),
                nn.SiLU(),
                nn.Linear(width, config.vfm_dim),
            )
        else:
            self.repa_head = None

    @property
    def null_class(self) -> int:
        return self.cond.null_index

    def _check_inputs(self, z_t: Tensor, t: Tensor, labels: Tensor) -> None:
        if z_t.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) state, got shape {tuple(z_t.shape)}")
        batch = z_t.shape[0]
        if t.shape != (batch,):
            raise ValueError(f"expected time shape ({batch},), got {tuple(t.shape)}")
        if labels.shape != (batch,):
            raise ValueError(f"expected label shape ({batch},), got {tuple(labels.shape)}")

    def forward_full(self, z_t: Tensor, t: Tensor, labels: Tensor) -> tuple[Tensor, AnchorSet]:
        """Raw prediction plus the anchor set (for alignment losses)."""
        self._check_inputs(z_t, t, labels)
        cond = self.cond(t, labels)
        anchors = self.semantics(z_t, cond)
        pred = self.fine(z_t, anchors, cond)
        return pred, anchors

    def forward(self, z_t: Tensor, t: Tensor, labels: Tensor) -> Tensor:
        pred, _ = self.forward_full(z_t, t, labels)
        return pred

    def velocity(self, z_t: Tensor, t: Tensor, labels: Tensor) -> Tensor:
        """Velocity-parameterized output regardless of the training target."""
        pred = self.forward(z_t, t, labels)
        if self.config.parameterization == "x_pred":
            return xpred_to_velocity(pred, z_t, t, self.config.t_guard)
        return pred
