import os

os.environ.setdefault("HYPERDIT_DETERMINISTIC", "1")

import pytest
import torch

torch.set_num_threads(1)

import hyperdit as hd


@pytest.fixture
def nano_config() -> hd.ModelConfig:
    return hd.ModelConfig()


@pytest.fixture
def tiny_config() -> hd.ModelConfig:
    """Smallest config that still exercises both streams and registers."""
    return hd.ModelConfig(
        img_size=16,
        patch_large=8,
        patch_small=4,
        hidden_dim=32,
        dit_blocks=2,
        num_connectors=1,
        num_heads=2,
        num_registers=4,
        num_classes=4,
        vfm_dim=8,
    )


@pytest.fixture
def tiny_model(tiny_config) -> hd.HyperDiT:
    return hd.build_model(tiny_config, seed=0)


def randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.05) -> None:
    """Overwrite every parameter with seeded noise so all gates are live."""
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=rng) * scale)
