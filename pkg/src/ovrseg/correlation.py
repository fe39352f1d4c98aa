"""Image-text correlation volumes and their fusion into per-class features.

For each rotation entry and each prompt, every spatial embedding is compared
against every class text embedding by cosine similarity. Stacking over
rotations and prompts gives a (H, W, N_C, |angles| * P) volume; a small conv
shared across classes fuses the channel axis down to the working feature
width.
"""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .backbones import TextEmbeddingSet


def cosine_correlation(fmap: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between each spatial vector and each text vector.

    fmap: (H, W, d), text: (N_C, d) -> (H, W, N_C). A zero vector on either
    side yields similarity 0 rather than NaN.
    """
    if fmap.shape[-1] != text.shape[-1]:
        raise ValueError(
            f"embedding dims differ: image {fmap.shape[-1]} vs text {text.shape[-1]}"
        )
    dots = fmap @ text.t()  # (H, W, N_C)
    fn = fmap.norm(dim=-1, keepdim=True)  # (H, W, 1)
    tn = text.norm(dim=-1)  # (N_C,)
    denom = fn * tn
    sim = torch.where(denom > 0, dots / denom.clamp(min=1e-12), torch.zeros_like(dots))
    return sim.clamp(-1.0, 1.0)


def correlation_volume(
    ensemble: Sequence[torch.Tensor],
    text: TextEmbeddingSet,
) -> torch.Tensor:
    """Stack per-rotation, per-prompt correlation maps along the channel axis.

    Channel order is rotation-major, prompt-minor: all P prompts for the first
    angle, then all P for the second, and so on. Output (H, W, N_C, |angles|*P).
    """
    slices = []
    for fmap in ensemble:
        for p in range(text.per_prompt.shape[1]):
            slices.append(cosine_correlation(fmap, text.per_prompt[:, p, :]))
    return torch.stack(slices, dim=-1)


class CorrelationFusion(nn.Module):
    """Conv fusing the rotation-prompt channel axis to the working width.

    Weights are shared across classes: the class axis rides along as the conv
    batch dimension.
    """

    def __init__(self, n_angles: int, n_prompts: int, feat_dim: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("fusion kernel size must be odd to preserve the grid")
        in_ch = n_angles * n_prompts
        self.in_channels = in_ch
        self.feat_dim = feat_dim
        self.conv = nn.Conv2d(in_ch, feat_dim, kernel_size, padding=kernel_size // 2)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        """(H, W, N_C, |angles|*P) -> (H, W, N_C, feat_dim)."""
        if volume.ndim != 4:
            raise ValueError(f"expected a 4d correlation volume, got {tuple(volume.shape)}")
        if volume.shape[-1] != self.in_channels:
            raise ValueError(
                f"volume has {volume.shape[-1]} channels, fusion expects {self.in_channels}"
            )
        h, w, n_c, _ = volume.shape
        x = volume.permute(2, 3, 0, 1)  # (N_C, ch, H, W)
        y = self.conv(x)  # (N_C, feat_dim, H, W)
        return y.permute(2, 3, 0, 1)  # (H, W, N_C, feat_dim)
