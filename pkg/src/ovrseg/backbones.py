"""Encoder interfaces, deterministic stub encoders, and the rotation ensemble.

Stub encoders stand in for the pretrained vision-language and guidance
backbones so the pipeline is testable on a laptop: they patchify the image and
apply a fixed seed-deterministic projection per patch, optionally followed by
a single attention head whose query/value projections are the fine-tunable
parameter group. Real-backbone adapters only need to satisfy the same
interfaces.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .registry import ClassRegistry, build_prompts

SUPPORTED_ANGLES = (0, 90, 180, 270)
DEFAULT_ANGLES = (0, 90, 180, 270)


def validate_angles(angles: Sequence[int]) -> tuple[int, ...]:
    angles = tuple(int(a) for a in angles)
    if len(set(angles)) != len(angles):
        raise ValueError("rotation angles must be distinct")
    if 0 not in angles:
        raise ValueError("rotation angle set must contain 0")
    for a in angles:
        if a % 360 not in SUPPORTED_ANGLES:
            raise ValueError(f"unsupported rotation angle {a}; allowed multiples of 90")
    return angles


def rotate_map(m: torch.Tensor, angle_deg: int) -> torch.Tensor:
    """Rotate a (H, W, ...) grid counterclockwise by a multiple of 90 degrees.

    Pure permutation, so rotate_map(rotate_map(m, a), -a) is bitwise exact.
    """
    if m.ndim < 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"rotate_map needs a square spatial grid, got {tuple(m.shape)}")
    if angle_deg % 90 != 0 or abs(angle_deg) > 270:
        raise ValueError(f"unsupported angle {angle_deg}; use 0, +-90, +-180, +-270")
    k = (angle_deg // 90) % 4
    if k == 0:
        return m
    return torch.rot90(m, k, dims=(0, 1))


@runtime_checkable
class VisionEncoder(Protocol):
    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


@runtime_checkable
class TextEncoder(Protocol):
    def __call__(self, prompts: Sequence[str]) -> torch.Tensor: ...


@runtime_checkable
class GuidanceEncoder(Protocol):
    def __call__(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]: ...


@dataclass
class TextEmbeddingSet:
    """Per-class, per-prompt text embeddings plus the prompt-averaged form."""

    per_prompt: torch.Tensor  # (N_C, P, d)
    prompt_averaged: torch.Tensor  # (N_C, d)

    @property
    def n_classes(self) -> int:
        return self.per_prompt.shape[0]

    @property
    def dim(self) -> int:
        return self.per_prompt.shape[2]

    def permuted(self, perm: Sequence[int]) -> "TextEmbeddingSet":
        idx = torch.as_tensor(list(perm), dtype=torch.long)
        return TextEmbeddingSet(self.per_prompt[idx], self.prompt_averaged[idx])


@dataclass
class GuidancePyramid:
    """Three guidance feature maps, shallow to deep, each (h, w, c)."""

    level1: torch.Tensor
    level2: torch.Tensor
    level3: torch.Tensor

    def __post_init__(self) -> None:
        for lv in (self.level1, self.level2, self.level3):
            if lv.ndim != 3:
                raise ValueError("guidance levels must be (h, w, c) maps")
        if self.level1.shape[0] < self.level3.shape[0] or self.level2.shape[0] < self.level3.shape[0]:
            raise ValueError("levels 1 and 2 must be at least as large spatially as level 3")


def _fixed_tensor(shape: tuple[int, ...], seed: int, scale: float = 1.0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64) * scale


class _AttentionHead(nn.Module):
    """Single-head self-attention over a token set, no positional terms.

    q/v projections are the group fine-tuned at the VL learning rate; k and the
    output projection stay frozen, mirroring the backbone fine-tuning policy.
    """

    def __init__(self, dim: int, seed: int):
        super().__init__()
        s = 1.0 / dim**0.5
        self.q_proj = nn.Parameter(_fixed_tensor((dim, dim), seed + 1, s).float())
        self.k_proj = nn.Parameter(_fixed_tensor((dim, dim), seed + 2, s).float(), requires_grad=False)
        self.v_proj = nn.Parameter(_fixed_tensor((dim, dim), seed + 3, s).float())
        # small output scale keeps the patch projection dominant at init
        self.out_proj = nn.Parameter(
            _fixed_tensor((dim, dim), seed + 4, 0.1 * s).float(), requires_grad=False
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:  # (n, d)
        q = tokens @ self.q_proj.t()
        k = tokens @ self.k_proj.t()
        v = tokens @ self.v_proj.t()
        attn = torch.softmax(q @ k.t() / tokens.shape[-1] ** 0.5, dim=-1)
        return tokens + (attn @ v) @ self.out_proj.t()


class StubVisionEncoder(nn.Module):
    """Patchify + fixed random projection, optional attention head on top.

    Deterministic for a seed; patch-aligned so 90-degree input rotations stay
    exact grid permutations.
    """

    FINETUNE_QV_PREFIXES = ("head.q_proj", "head.v_proj")

    def __init__(self, patch_size: int = 8, embed_dim: int = 64, seed: int = 0,
                 with_qv_head: bool = True):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        fan_in = patch_size * patch_size * 3
        w = _fixed_tensor((embed_dim, fan_in), seed, scale=1.0 / fan_in**0.5)
        self.proj = nn.Parameter(w.float(), requires_grad=False)
        self.head = _AttentionHead(embed_dim, seed + 100) if with_qv_head else None

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (S, S, 3) image, got {tuple(image.shape)}")
        s = image.shape[0]
        if image.shape[1] != s:
            raise ValueError("stub vision encoder needs square inputs")
        p = self.patch_size
        if s % p != 0:
            raise ValueError(f"image side {s} not divisible by patch size {p}")
        h = s // p
        x = image.to(self.proj.dtype)
        # (h, w, p*p*3) patches in row-major order
        patches = x.reshape(h, p, h, p, 3).permute(0, 2, 1, 3, 4).reshape(h, h, p * p * 3)
        tokens = patches @ self.proj.t()  # (h, w, d)
        if self.head is not None:
            tokens = self.head(tokens.reshape(h * h, -1)).reshape(h, h, -1)
        return tokens


class StubGuidanceEncoder(nn.Module):
    """Three patchify-projection taps standing in for a feature pyramid.

    All parameters are frozen, matching the guidance-encoder training policy.
    """

    def __init__(self, patch_sizes: Sequence[int] = (4, 8, 8),
                 dims: Sequence[int] = (32, 48, 64), seed: int = 0):
        super().__init__()
        if len(patch_sizes) != 3 or len(dims) != 3:
            raise ValueError("guidance stub needs exactly three taps")
        if not (patch_sizes[0] <= patch_sizes[2] and patch_sizes[1] <= patch_sizes[2]):
            raise ValueError("levels 1 and 2 must not be coarser than level 3")
        self.patch_sizes = tuple(int(p) for p in patch_sizes)
        self.dims = tuple(int(d) for d in dims)
        for i, (p, d) in enumerate(zip(self.patch_sizes, self.dims)):
            fan_in = p * p * 3
            w = _fixed_tensor((d, fan_in), seed + 10 * (i + 1), scale=1.0 / fan_in**0.5)
            self.register_parameter(f"proj{i + 1}", nn.Parameter(w.float(), requires_grad=False))

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if image.ndim != 3 or image.shape[0] != image.shape[1]:
            raise ValueError("stub guidance encoder needs a square (S, S, 3) image")
        s = image.shape[0]
        maps = []
        for i, p in enumerate(self.patch_sizes):
            if s % p != 0:
                raise ValueError(f"image side {s} not divisible by guidance patch size {p}")
            proj = getattr(self, f"proj{i + 1}")
            h = s // p
            x = image.to(proj.dtype)
            patches = x.reshape(h, p, h, p, 3).permute(0, 2, 1, 3, 4).reshape(h, h, p * p * 3)
            maps.append(patches @ proj.t())
        return maps[0], maps[1], maps[2]


class StubTextEncoder(nn.Module):
    """Hash-seeded word embeddings pooled through one attention head.

    Each word maps to a pseudo-random vector derived from sha256(seed, word),
    so outputs are deterministic across processes; the final embedding is
    unit-norm.
    """

    FINETUNE_QV_PREFIXES = ("head.q_proj", "head.v_proj")

    def __init__(self, embed_dim: int = 64, seed: int = 0, with_qv_head: bool = True):
        super().__init__()
        self.embed_dim = embed_dim
        self.seed = seed
        self.head = _AttentionHead(embed_dim, seed + 200) if with_qv_head else None

    def _word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        return rng.standard_normal(self.embed_dim)

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        dtype = torch.float32 if self.head is None else self.head.q_proj.dtype
        out = []
        for prompt in prompts:
            words = prompt.split()
            if not words:
                raise ValueError("cannot encode an empty prompt")
            vecs = np.stack([self._word_vector(w) for w in words])
            tokens = torch.as_tensor(vecs, dtype=dtype)
            if self.head is not None:
                tokens = self.head(tokens)
            emb = tokens.mean(dim=0)
            out.append(emb / emb.norm())
        return torch.stack(out)


def encode_image_ensemble(
    image: torch.Tensor,
    angles: Sequence[int],
    encoder: VisionEncoder,
) -> list[torch.Tensor]:
    """Dense embeddings of the image encoded at each rotation, un-rotated back.

    Entry for angle theta is rotate_map(encoder(rotate_map(image, theta)), -theta).
    """
    angles = validate_angles(angles)
    maps = []
    ref_shape = None
    for theta in angles:
        fmap = encoder(rotate_map(image, theta))
        if fmap.ndim != 3 or fmap.shape[0] != fmap.shape[1]:
            raise ValueError(f"encoder returned non-square map {tuple(fmap.shape)}")
        if ref_shape is None:
            ref_shape = fmap.shape
        elif fmap.shape != ref_shape:
            raise ValueError("encoder output shape varies across rotations")
        maps.append(rotate_map(fmap, -theta))
    return maps


def encode_text(
    prompts: Sequence[str],
    encoder: TextEncoder,
    registry: ClassRegistry,
) -> TextEmbeddingSet:
    """Encode class-major prompts into a per-prompt and prompt-averaged set."""
    n, p = registry.n_classes, registry.n_prompts
    if len(prompts) != n * p:
        raise ValueError(f"expected {n * p} prompts for {n} classes x {p} templates, got {len(prompts)}")
    emb = encoder(list(prompts))
    if emb.ndim != 2 or emb.shape[0] != n * p:
        raise ValueError(f"text encoder returned shape {tuple(emb.shape)}, expected ({n * p}, d)")
    per_prompt = emb.reshape(n, p, -1)
    return TextEmbeddingSet(per_prompt=per_prompt, prompt_averaged=per_prompt.mean(dim=1))


def encode_class_registry(registry: ClassRegistry, encoder: TextEncoder) -> TextEmbeddingSet:
    return encode_text(build_prompts(registry), encoder, registry)


def resize_bilinear(m: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (h, w, c) map with half-pixel centers."""
    if m.shape[:2] == tuple(size):
        return m
    x = m.permute(2, 0, 1).unsqueeze(0)  # (1, c, h, w)
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x.squeeze(0).permute(1, 2, 0)


def encode_guidance(
    image: torch.Tensor,
    encoder: GuidanceEncoder,
    vl_grid: tuple[int, int] | None = None,
) -> GuidancePyramid:
    """Extract the three-level guidance pyramid, aligning level 3 to the VL grid.

    When the deepest tap's stride differs from the VL embedding stride, level 3
    is bilinearly resized to ``vl_grid`` so downstream refinement sees matched
    grids.
    """
    taps = encoder(image)
    if len(taps) != 3:
        raise ValueError(f"guidance encoder must expose three taps, got {len(taps)}")
    level1, level2, level3 = taps
    if vl_grid is not None:
        level3 = resize_bilinear(level3, tuple(vl_grid))
    return GuidancePyramid(level1=level1, level2=level2, level3=level3)
