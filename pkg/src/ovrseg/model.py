"""The assembled segmentation model: encoders through decoder, one forward.

The model owns the fusion, refinement, back-projection, and decoder
parameters; the encoders are passed in (stub or real) and held as submodules
so the parameter partition can see them. Back-projection is built for the
training class count and skipped whenever the presented class set differs or
training outputs are not requested.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .backbones import (
    DEFAULT_ANGLES,
    GuidancePyramid,
    StubGuidanceEncoder,
    StubTextEncoder,
    StubVisionEncoder,
    TextEmbeddingSet,
    encode_guidance,
    encode_image_ensemble,
    encode_text,
    validate_angles,
)
from .backprojection import BackProjection, semantic_loss
from .correlation import CorrelationFusion, correlation_volume
from .decoder import Decoder
from .refinement import RefinementStack
from .registry import ClassRegistry, build_prompts


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults target desk-scale runs."""

    angles: tuple[int, ...] = DEFAULT_ANGLES
    feat_dim: int = 128
    refine_depth: int = 2
    window_size: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    bp_hidden_dim: int | None = None
    guidance_resize: str = "auto"
    # stub encoder knobs
    vl_patch_size: int = 8
    vl_embed_dim: int = 64
    guidance_patch_sizes: tuple[int, int, int] = (4, 8, 8)
    guidance_dims: tuple[int, int, int] = (32, 48, 64)
    stub_qv_head: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.angles = validate_angles(self.angles)


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (out_px, out_px, N_C)
    semantic: torch.Tensor | None  # scalar loss, only when back-projection ran
    refined: torch.Tensor | None = field(repr=False, default=None)  # (H, W, N_C, d)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig, registry_train: ClassRegistry,
                 vision_encoder: nn.Module | None = None,
                 text_encoder: nn.Module | None = None,
                 guidance_encoder: nn.Module | None = None):
        super().__init__()
        self.config = config
        self.registry_train = registry_train
        self.vision_encoder = vision_encoder if vision_encoder is not None else StubVisionEncoder(
            config.vl_patch_size, config.vl_embed_dim, config.seed,
            with_qv_head=config.stub_qv_head)
        self.text_encoder = text_encoder if text_encoder is not None else StubTextEncoder(
            config.vl_embed_dim, config.seed, with_qv_head=config.stub_qv_head)
        self.guidance_encoder = guidance_encoder if guidance_encoder is not None else (
            StubGuidanceEncoder(config.guidance_patch_sizes, config.guidance_dims, config.seed))
        g1, g2, g3 = self._guidance_channel_dims()
        text_dim = self._text_dim()
        self.fusion = CorrelationFusion(len(config.angles), registry_train.n_prompts,
                                        config.feat_dim)
        self.refinement = RefinementStack(config.feat_dim, g3, text_dim,
                                          depth=config.refine_depth,
                                          window_size=config.window_size,
                                          num_heads=config.num_heads,
                                          mlp_ratio=config.mlp_ratio)
        self.back_projection = BackProjection(registry_train.n_classes, config.feat_dim,
                                              g3, config.bp_hidden_dim)
        self.decoder = Decoder(config.feat_dim, (g2, g1), config.guidance_resize)

    def _guidance_channel_dims(self) -> tuple[int, int, int]:
        dims = getattr(self.guidance_encoder, "dims", None)
        if dims is not None:
            return tuple(dims)
        probe_side = max(self.config.guidance_patch_sizes) * 2
        with torch.no_grad():
            taps = self.guidance_encoder(torch.zeros(probe_side, probe_side, 3))
        return tuple(t.shape[2] for t in taps)

    def _text_dim(self) -> int:
        dim = getattr(self.text_encoder, "embed_dim", None)
        if dim is not None:
            return int(dim)
        with torch.no_grad():
            emb = self.text_encoder(["probe"])
        return emb.shape[1]

    def encode_classes(self, registry: ClassRegistry) -> TextEmbeddingSet:
        if registry.n_prompts != self.registry_train.n_prompts:
            raise ValueError(
                f"registry uses {registry.n_prompts} templates, model was built for "
                f"{self.registry_train.n_prompts}"
            )
        return encode_text(build_prompts(registry), self.text_encoder, registry)

    def forward(self, image: torch.Tensor, text: TextEmbeddingSet,
                with_semantic: bool = False) -> ForwardOutput:
        """Run the full pipeline on one (S, S, 3) image against a class set."""
        if image.ndim != 3 or image.shape[0] != image.shape[1]:
            raise ValueError(f"expected a square (S, S, 3) image, got {tuple(image.shape)}")
        out_px = image.shape[0]
        ensemble = encode_image_ensemble(image, self.config.angles, self.vision_encoder)
        vl_grid = ensemble[0].shape[:2]
        pyramid = encode_guidance(image, self.guidance_encoder, vl_grid=vl_grid)
        volume = correlation_volume(ensemble, text)
        phi = self.fusion(volume)
        refined = self.refinement(phi, pyramid.level3, text)
        semantic = None
        if with_semantic:
            if text.n_classes != self.registry_train.n_classes:
                raise ValueError(
                    f"back-projection is bound to {self.registry_train.n_classes} training "
                    f"classes but {text.n_classes} were presented"
                )
            psi = self.back_projection(refined)
            semantic = semantic_loss(psi, pyramid.level3)
        logits = self.decoder(refined, pyramid, out_px)
        return ForwardOutput(logits=logits, semantic=semantic, refined=refined)

    @torch.no_grad()
    def infer(self, image: torch.Tensor, registry: ClassRegistry) -> torch.Tensor:
        """Logits for an arbitrary class registry; back-projection never runs."""
        text = self.encode_classes(registry)
        return self.forward(image, text, with_semantic=False).logits


def build_model(config: ModelConfig, registry_train: ClassRegistry,
                **encoders: nn.Module) -> SegmentationModel:
    return SegmentationModel(config, registry_train, **encoders)
