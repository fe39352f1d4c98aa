"""Losses, the parameter-group policy, and the optimization loop.

The loss is per-class binary cross-entropy summed over classes and averaged
over non-ignored pixels, plus the semantic back-projection term with unit
weight. Parameters split into three groups: query/value projections of the
vision-language encoders (fine-tuned at a small rate), everything else in the
pipeline (main rate), and frozen parameters (the rest of the VL encoders and
the whole guidance encoder), which are never given to the optimizer.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .model import SegmentationModel
from .registry import IGNORE_INDEX

ITER_PRESETS = {"isaid": 10000, "dlrsd": 5000, "oem": 15000}


class NonFiniteLossError(RuntimeError):
    """Raised when a loss turns NaN or infinite; the step is not applied."""


@dataclass
class TrainConfig:
    lr_vl: float = 2e-6
    lr_other: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    max_iters: int = 1000
    seed: int = 0
    checkpoint_interval: int = 500
    bce_weight: float = 1.0
    sem_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.lr_vl < 0 or self.lr_other < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


def bce_loss(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Class-summed, pixel-averaged binary cross-entropy from raw logits.

    logits: (H, W, N_C); mask: (H, W) integer class indices with IGNORE_INDEX
    marking pixels excluded from both the numerator and the pixel count. When
    every pixel is ignored the loss is 0 and a warning is emitted.
    """
    if logits.ndim != 3:
        raise ValueError(f"expected (H, W, N_C) logits, got {tuple(logits.shape)}")
    if mask.shape != logits.shape[:2]:
        raise ValueError(
            f"mask {tuple(mask.shape)} does not match logit grid {tuple(logits.shape[:2])}"
        )
    if not torch.isfinite(logits).all():
        raise NonFiniteLossError("non-finite logits entering the loss")
    n_c = logits.shape[2]
    valid = mask != IGNORE_INDEX
    if not bool(valid.any()):
        warnings.warn("all pixels ignored; binary cross-entropy defined as 0")
        return logits.sum() * 0.0
    labels = mask[valid].long()
    if int(labels.max()) >= n_c:
        raise ValueError(
            f"mask contains class {int(labels.max())} but logits cover {n_c} classes"
        )
    picked = logits[valid]  # (n_valid, N_C)
    onehot = F.one_hot(labels, n_c).to(picked.dtype)
    per_pixel = F.binary_cross_entropy_with_logits(picked, onehot, reduction="none").sum(dim=1)
    return per_pixel.mean()


def total_loss(bce: torch.Tensor, sem: torch.Tensor,
               bce_weight: float = 1.0, sem_weight: float = 1.0) -> torch.Tensor:
    return bce_weight * bce + sem_weight * sem


@dataclass
class ParameterPartition:
    """Named parameter lists covering the model exactly once each."""

    vl_qv: list[tuple[str, nn.Parameter]] = field(default_factory=list)
    main: list[tuple[str, nn.Parameter]] = field(default_factory=list)
    frozen: list[tuple[str, nn.Parameter]] = field(default_factory=list)

    def names(self, group: str) -> list[str]:
        return [n for n, _ in getattr(self, group)]

    @property
    def total(self) -> int:
        return len(self.vl_qv) + len(self.main) + len(self.frozen)


def partition_parameters(model: SegmentationModel) -> ParameterPartition:
    """Split parameters into fine-tuned VL q/v, main pipeline, and frozen sets.

    Inside the VL encoders only parameters listed in the encoder's
    FINETUNE_QV_PREFIXES may be trainable; a trainable VL parameter outside
    those prefixes is rejected so new adapters must declare their fine-tuned
    set explicitly. Guidance-encoder parameters are always frozen.
    """
    part = ParameterPartition()
    for name, p in model.named_parameters():
        scope = name.split(".", 1)[0]
        if scope in ("vision_encoder", "text_encoder"):
            encoder = getattr(model, scope)
            prefixes = tuple(getattr(encoder, "FINETUNE_QV_PREFIXES", ()))
            sub = name.split(".", 1)[1]
            if any(sub.startswith(pref) for pref in prefixes):
                part.vl_qv.append((name, p))
            elif p.requires_grad:
                raise ValueError(
                    f"trainable parameter {name!r} is not registered in "
                    f"{scope}.FINETUNE_QV_PREFIXES; declare it or freeze it"
                )
            else:
                part.frozen.append((name, p))
        elif scope == "guidance_encoder":
            part.frozen.append((name, p))
        else:
            part.main.append((name, p))
    return part


def _decay_split(params: list[tuple[str, nn.Parameter]]) -> tuple[list, list]:
    decay, no_decay = [], []
    for name, p in params:
        leaf = name.rsplit(".", 1)[-1]
        if "bias" in leaf or "norm" in name.lower() or p.ndim <= 1:
            no_decay.append(p)
        else:
            decay.append(p)
    return decay, no_decay


def build_optimizer(partition: ParameterPartition, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW over the two trainable groups; frozen parameters are omitted.

    Weight decay applies to matrix-shaped weights only; biases and
    normalization parameters are excluded.
    """
    groups = []
    for params, lr in ((partition.vl_qv, config.lr_vl), (partition.main, config.lr_other)):
        decay, no_decay = _decay_split(params)
        if decay:
            groups.append({"params": decay, "lr": lr, "weight_decay": config.weight_decay})
        if no_decay:
            groups.append({"params": no_decay, "lr": lr, "weight_decay": 0.0})
    return torch.optim.AdamW(groups)


@dataclass
class LossRecord:
    iteration: int
    bce: float
    sem: float
    total: float

    def as_line(self) -> str:
        return f"{self.iteration},{self.bce:.17g},{self.sem:.17g},{self.total:.17g}"


def train_step(batch: list[tuple[torch.Tensor, torch.Tensor]],
               model: SegmentationModel,
               optimizer: torch.optim.Optimizer,
               config: TrainConfig,
               iteration: int = 0) -> LossRecord:
    """One optimization step over a batch of (image, mask) pairs.

    A non-finite loss aborts before backward, leaving parameters and
    optimizer state untouched.
    """
    if not batch:
        raise ValueError("empty batch")
    model.train()
    text = model.encode_classes(model.registry_train)
    bce_terms, sem_terms = [], []
    for image, mask in batch:
        out = model(image, text, with_semantic=True)
        bce_terms.append(bce_loss(out.logits, mask))
        sem_terms.append(out.semantic)
    bce = torch.stack(bce_terms).mean()
    sem = torch.stack(sem_terms).mean()
    loss = total_loss(bce, sem, config.bce_weight, config.sem_weight)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss at iteration {iteration}: bce={bce.item()!r} sem={sem.item()!r}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossRecord(iteration, bce.item(), sem.item(), loss.item())


class Trainer:
    """Drives train_step over a sample list with seeded epoch shuffling."""

    def __init__(self, model: SegmentationModel,
                 samples: list[tuple[torch.Tensor, torch.Tensor]],
                 config: TrainConfig):
        if not samples:
            raise ValueError("no training samples")
        self.model = model
        self.samples = samples
        self.config = config
        self.partition = partition_parameters(model)
        self.optimizer = build_optimizer(self.partition, config)
        self.records: list[LossRecord] = []
        self._order: list[int] = []
        self._cursor = 0
        self._epoch_rng = torch.Generator().manual_seed(config.seed)

    def _next_indices(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if self._cursor >= len(self._order):
                perm = torch.randperm(len(self.samples), generator=self._epoch_rng)
                self._order = perm.tolist()
                self._cursor = 0
            out.append(self._order[self._cursor])
            self._cursor += 1
        return out

    def next_batch(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        idx = self._next_indices(min(self.config.batch_size, len(self.samples)))
        return [self.samples[i] for i in idx]

    def step(self) -> LossRecord:
        record = train_step(self.next_batch(), self.model, self.optimizer,
                            self.config, iteration=len(self.records) + 1)
        self.records.append(record)
        return record

    def run(self, n_steps: int | None = None,
            on_record=None) -> list[LossRecord]:
        n = self.config.max_iters if n_steps is None else n_steps
        for _ in range(n):
            record = self.step()
            if on_record is not None:
                on_record(record)
        return self.records
