"""Relation-aware weakly supervised phrase grounding with coarse-to-fine matching."""
from relgrounding.corpus import GroundingInstance, load_corpus, save_corpus
from relgrounding.geometry import Box, Offset, apply_offset, encode_offset, iou
from relgrounding.metrics import MetricsReport, evaluate
from relgrounding.model import GroundingNet, ModelConfig, infer
from relgrounding.synthetic import SynthConfig, generate_synthetic
from relgrounding.trainer import RunConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Box",
    "GroundingInstance",
    "GroundingNet",
    "MetricsReport",
    "ModelConfig",
    "Offset",
    "RunConfig",
    "SynthConfig",
    "apply_offset",
    "encode_offset",
    "evaluate",
    "generate_synthetic",
    "infer",
    "iou",
    "load_checkpoint",
    "load_corpus",
    "save_checkpoint",
    "save_corpus",
    "train",
]
