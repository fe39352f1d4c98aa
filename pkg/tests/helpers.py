"""Shared builders for desk-scale models and synthetic training setups."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass

import torch

from ovrseg.data import (
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    load_sample,
    reindex_mask_to_subset,
    tile,
)
from ovrseg.model import ModelConfig, SegmentationModel
from ovrseg.registry import ClassRegistry
from ovrseg.training import TrainConfig, Trainer


def tiny_model_config(seed: int = 0, **overrides) -> ModelConfig:
    base = dict(
        feat_dim=16,
        vl_embed_dim=16,
        vl_patch_size=8,
        guidance_patch_sizes=(4, 8, 8),
        guidance_dims=(8, 12, 16),
        window_size=4,
        num_heads=4,
        mlp_ratio=2.0,
        refine_depth=1,
        seed=seed,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class TrainingSetup:
    manifest: DatasetManifest
    registry_full: ClassRegistry
    registry_train: ClassRegistry
    model: SegmentationModel
    samples: list[tuple[torch.Tensor, torch.Tensor]]
    trainer: Trainer

    @property
    def partition(self):
        return self.trainer.partition


def train_samples(manifest: DatasetManifest,
                  subset: ClassRegistry) -> list[tuple[torch.Tensor, torch.Tensor]]:
    full = manifest.registry()
    out = []
    for i in range(len(manifest.samples)):
        image, mask = load_sample(manifest, i, phase="train")
        out.extend(tile(image, reindex_mask_to_subset(mask, full, subset), manifest.tile_px))
    return out


def tiny_training_setup(seed: int = 0, noise: float = 0.03, image_px: int = 32,
                        n_classes: int = 3, n_images: int = 4,
                        lr_other: float = 1e-3, max_iters: int = 50,
                        out_dir: str | None = None,
                        model_overrides: dict | None = None,
                        train_overrides: dict | None = None) -> TrainingSetup:
    out_dir = out_dir or tempfile.mkdtemp(prefix="ovrseg-tiny-")
    spec = SyntheticSpec(seed=seed, image_px=image_px, n_classes=n_classes,
                         n_images=n_images, shapes_per_image=2, noise=noise)
    manifest = load_manifest(generate_synthetic(spec, out_dir))
    full = manifest.registry()
    subset = full.seen_subset()
    model = SegmentationModel(tiny_model_config(seed=seed, **(model_overrides or {})), subset)
    samples = train_samples(manifest, subset)
    config = TrainConfig(lr_other=lr_other, batch_size=4, max_iters=max_iters,
                         seed=seed, **(train_overrides or {}))
    trainer = Trainer(model, samples, config)
    return TrainingSetup(manifest=manifest, registry_full=full, registry_train=subset,
                         model=model, samples=samples, trainer=trainer)
