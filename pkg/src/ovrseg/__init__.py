"""Open-vocabulary remote-sensing segmentation pipeline."""

from .backbones import (
    GuidancePyramid,
    StubGuidanceEncoder,
    StubTextEncoder,
    StubVisionEncoder,
    TextEmbeddingSet,
    encode_guidance,
    encode_image_ensemble,
    encode_text,
    rotate_map,
)
from .backprojection import BackProjection, semantic_loss
from .correlation import CorrelationFusion, correlation_volume, cosine_correlation
from .decoder import Decoder, DecoderStage, transform_guidance
from .evaluation import (
    ConfusionAccumulator,
    MetricsReport,
    average_reports,
    predict,
    split_miou,
)
from .model import ModelConfig, SegmentationModel, build_model
from .refinement import ClassRefineBlock, RefinementStack, SpatialRefineBlock
from .registry import (
    GENERIC_TEMPLATES,
    IGNORE_INDEX,
    REMOTE_SENSING_TEMPLATES,
    ClassRegistry,
    build_prompts,
)
from .training import (
    TrainConfig,
    Trainer,
    bce_loss,
    build_optimizer,
    partition_parameters,
    total_loss,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "BackProjection",
    "ClassRefineBlock",
    "ClassRegistry",
    "ConfusionAccumulator",
    "CorrelationFusion",
    "Decoder",
    "DecoderStage",
    "GENERIC_TEMPLATES",
    "GuidancePyramid",
    "IGNORE_INDEX",
    "MetricsReport",
    "ModelConfig",
    "REMOTE_SENSING_TEMPLATES",
    "RefinementStack",
    "SegmentationModel",
    "SpatialRefineBlock",
    "StubGuidanceEncoder",
    "StubTextEncoder",
    "StubVisionEncoder",
    "TextEmbeddingSet",
    "TrainConfig",
    "Trainer",
    "average_reports",
    "bce_loss",
    "build_model",
    "build_optimizer",
    "build_prompts",
    "correlation_volume",
    "cosine_correlation",
    "encode_guidance",
    "encode_image_ensemble",
    "encode_text",
    "partition_parameters",
    "predict",
    "rotate_map",
    "semantic_loss",
    "split_miou",
    "total_loss",
    "train_step",
    "transform_guidance",
]
