"""Walk an image folder, embed every image, write one HDITFEAT file."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbones import ExporterError, load_backbone
from .format import FeatureWriter

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
RESIZE_POLICIES = ("crop", "stretch")


@dataclass
class ExportJob:
    input_dir: str
    output: str
    model: str = "mock-vit-s14"
    # "crop": shortest side to the model's input size, then center crop;
    # "stretch": resize both sides directly.
    resize: str = "crop"

    def validate(self) -> None:
        if self.resize not in RESIZE_POLICIES:
            raise ExporterError(
                f"resize policy must be one of {RESIZE_POLICIES}, got {self.resize!r}"
            )
        if not Path(self.input_dir).is_dir():
            raise ExporterError(f"input directory {self.input_dir!r} does not exist")


@dataclass
class ExportSummary:
    output: str
    model: str
    token_count: int
    dim: int
    written: int
    skipped: int


def list_images(root: str | Path) -> list[str]:
    """Relative POSIX paths of all images under ``root``, sorted."""
    base = Path(root)
    found = [
        p.relative_to(base).as_posix()
        for p in base.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    ]
    return sorted(found)


def preprocess(image: Image.Image, size: int, policy: str) -> torch.Tensor:
    """RGB-convert and resize to ``(3, size, size)`` float32 in [0, 1]."""
    image = image.convert("RGB")
    if policy == "stretch":
        image = image.resize((size, size), Image.BICUBIC)
    else:
        w, h = image.size
        scale = size / min(w, h)
        image = image.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BICUBIC)
        w, h = image.size
        left = (w - size) // 2
        top = (h - size) // 2
        image = image.crop((left, top, left + size, top + size))
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def export(job: ExportJob) -> ExportSummary:
    """Embed every readable image under the job's folder into one file.

    Unreadable images are skipped with a warning; a model that cannot be
    loaded aborts the job before anything is written.
    """
    job.validate()
    backbone = load_backbone(job.model)
    spec = backbone.spec
    names = list_images(job.input_dir)

    out_path = Path(job.output)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    skipped = 0
    with FeatureWriter(out_path, spec.token_count, spec.dim) as writer:
        for name in names:
            try:
                with Image.open(Path(job.input_dir) / name) as img:
                    tensor = preprocess(img, spec.input_size, job.resize)
            except Exception as err:
                warnings.warn(f"skipping unreadable image {name!r}: {err}", stacklevel=2)
                skipped += 1
                continue
            tokens = backbone.embed(tensor)
            writer.add(name, tokens.numpy())
        written = writer.count
    return ExportSummary(
        output=str(out_path),
        model=job.model,
        token_count=spec.token_count,
        dim=spec.dim,
        written=written,
        skipped=skipped,
    )
