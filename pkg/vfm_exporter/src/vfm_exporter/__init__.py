"""Export visual-foundation-model patch features to the HDITFEAT format."""

from .backbones import (
    BackboneSpec,
    ExporterError,
    HubBackbone,
    MockPatchBackbone,
    available_models,
    load_backbone,
)
from .export import ExportJob, ExportSummary, export, list_images, preprocess
from .format import MAGIC, VERSION, FeatureWriteError, FeatureWriter

__version__ = "0.1.0"

__all__ = [
    "MAGIC",
    "VERSION",
    "BackboneSpec",
    "ExporterError",
    "ExportJob",
    "ExportSummary",
    "FeatureWriteError",
    "FeatureWriter",
    "HubBackbone",
    "MockPatchBackbone",
    "available_models",
    "export",
    "list_images",
    "load_backbone",
    "preprocess",
    "__version__",
]
