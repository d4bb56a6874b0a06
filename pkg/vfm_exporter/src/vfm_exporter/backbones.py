"""Feature backbones: a deterministic mock family plus hub-loaded models.

Every backbone maps one preprocessed ``(3, S, S)`` image tensor in [0, 1] to a
``(K, D)`` float32 token grid in raster order, where ``K = (S / patch)**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor


class ExporterError(RuntimeError):
    """Unrecoverable export problem (unknown or unloadable model, bad job)."""


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_size: int
    patch: int
    dim: int

    def __post_init__(self) -> None:
        if self.input_size % self.patch:
            raise ExporterError(
                f"{self.name}: patch {self.patch} must divide input size {self.input_size}"
            )

    @property
    def grid(self) -> int:
        return self.input_size // self.patch

    @property
    def token_count(self) -> int:
        return self.grid**2


class MockPatchBackbone:
    """Seeded affine read-out of raw patches.

    A stand-in with the interface and geometry of a patch-14 vision
    transformer: deterministic across processes (fixed-seed projection), cheap,
    and dependency-free, so pipelines can be built and tested before real
    model weights are available.  The affine bias keeps all-black patches away
    from the zero vector.
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0):
        self.spec = spec
        n_in = 3 * spec.patch * spec.patch
        rng = torch.Generator().manual_seed(seed)
        self.weight = torch.randn(n_in, spec.dim, generator=rng) / math.sqrt(n_in)
        self.bias = torch.randn(spec.dim, generator=rng) / math.sqrt(spec.dim)

    def embed(self, image: Tensor) -> Tensor:
        spec = self.spec
        expected = (3, spec.input_size, spec.input_size)
        if tuple(image.shape) != expected:
            raise ExporterError(
                f"{spec.name}: expected image shape {expected}, got {tuple(image.shape)}"
            )
        p = spec.patch
        patches = image.unfold(1, p, p).unfold(2, p, p)  # (3, gh, gw, p, p)
        patches = patches.permute(1, 2, 0, 3, 4).reshape(spec.token_count, 3 * p * p)
        return patches.to(torch.float32) @ self.weight + self.bias


class HubBackbone:
    """Wrapper over a torch.hub vision transformer exposing patch tokens."""

    def __init__(self, spec: BackboneSpec, model):
        self.spec = spec
        self.model = model.eval()

    def embed(self, image: Tensor) -> Tensor:
        with torch.no_grad():
            out = self.model.forward_features(image.unsqueeze(0))
        tokens = out["x_norm_patchtokens"][0]
        if tokens.shape != (self.spec.token_count, self.spec.dim):
            raise ExporterError(
                f"{self.spec.name}: model returned {tuple(tokens.shape)} tokens, "
                f"expected ({self.spec.token_count}, {self.spec.dim})"
            )
        return tokens.to(torch.float32)


def _load_hub(spec: BackboneSpec, repo: str, entry: str):
    try:
        model = torch.hub.load(repo, entry)
    except Exception as err:
        raise ExporterError(f"could not load model {spec.name!r}: {err}") from None
    return HubBackbone(spec, model)


_MOCKS = {
    "mock-vit-s14": BackboneSpec("mock-vit-s14", input_size=224, patch=14, dim=384),
    "mock-vit-b14": BackboneSpec("mock-vit-b14", input_size=224, patch=14, dim=768),
}

_HUB = {
    "dinov2_vits14": BackboneSpec("dinov2_vits14", input_size=224, patch=14, dim=384),
    "dinov2_vitb14": BackboneSpec("dinov2_vitb14", input_size=224, patch=14, dim=768),
}


def available_models() -> list[str]:
    return sorted(_MOCKS) + sorted(_HUB)


def load_backbone(name: str):
    if name in _MOCKS:
        return MockPatchBackbone(_MOCKS[name])
    if name in _HUB:
        return _load_hub(_HUB[name], "facebookresearch/dinov2", name)
    raise ExporterError(
        f"could not load model {name!r}: unknown name; choose from {available_models()}"
    )
