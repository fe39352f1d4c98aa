"""Attention-aware upsampling decoder producing per-class logit maps.

Each stage doubles the grid with a transposed convolution, derives a spatial
attention map and a channel attention vector from the class-averaged upsampled
features, re-weights the stage's guidance map with them, and fuses guidance
and correlation features with a small convolution. Two stages take the volume
from (H, W) to (4H, 4W); a class-shared head plus bilinear upsampling yields
full-resolution logits.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import GuidancePyramid, resize_bilinear


def upsample_nearest2x(m: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor doubling of a (h, w, c) map: each cell becomes 2x2."""
    x = m.permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, scale_factor=2, mode="nearest")
    return x.squeeze(0).permute(1, 2, 0)


def transform_guidance(g: torch.Tensor, a_sp: torch.Tensor, a_ch: torch.Tensor) -> torch.Tensor:
    """Nearest-upsample the guidance map and re-weight it with both attentions.

    g: (h, w, c); a_sp: (2h, 2w, 1); a_ch: (1, 1, c). Output is
    a_sp * up(g, 2) + a_ch * up(g, 2) + up(g, 2) with pure broadcasting.
    """
    up = upsample_nearest2x(g)
    if a_sp.shape[:2] != up.shape[:2] or a_sp.shape[2] != 1:
        raise ValueError(
            f"spatial attention {tuple(a_sp.shape)} misaligned with upsampled guidance {tuple(up.shape)}"
        )
    if a_ch.shape != (1, 1, up.shape[2]):
        raise ValueError(
            f"channel attention {tuple(a_ch.shape)} does not match guidance channels {up.shape[2]}"
        )
    return a_sp * up + a_ch * up + up


class DecoderStage(nn.Module):
    """One doubling stage: upsample, attend, transform guidance, fuse."""

    def __init__(self, feat_dim: int, guidance_dim: int):
        super().__init__()
        self.feat_dim = feat_dim
        self.guidance_dim = guidance_dim
        self.upconv = nn.ConvTranspose2d(feat_dim, feat_dim, 2, stride=2)
        self.spatial_attn = nn.Conv2d(1, 1, 7, padding=3)
        self.channel_attn = nn.Conv2d(feat_dim, guidance_dim, 1)
        self.fuse_conv = nn.Conv2d(feat_dim + guidance_dim, feat_dim, 3, padding=1)

    def upsample2x(self, phi: torch.Tensor) -> torch.Tensor:
        """(H, W, N_C, d) -> (2H, 2W, N_C, d), weights shared across classes."""
        if phi.ndim != 4 or phi.shape[3] != self.feat_dim:
            raise ValueError(f"expected (H, W, N_C, {self.feat_dim}) volume, got {tuple(phi.shape)}")
        x = phi.permute(2, 3, 0, 1)  # (N_C, d, H, W)
        y = self.upconv(x)
        return y.permute(2, 3, 0, 1)

    def compute_attentions(self, phi2x_classavg: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Class-averaged (2H, 2W, d) features -> ((2H, 2W, 1), (1, 1, guidance_dim))."""
        pooled_sp = phi2x_classavg.mean(dim=2, keepdim=True)  # (2H, 2W, 1)
        a_sp = self.spatial_attn(pooled_sp.permute(2, 0, 1).unsqueeze(0))
        a_sp = a_sp.squeeze(0).permute(1, 2, 0)
        pooled_ch = phi2x_classavg.mean(dim=(0, 1))  # (d,)
        a_ch = self.channel_attn(pooled_ch.view(1, -1, 1, 1))
        return a_sp, a_ch.view(1, 1, -1)

    def fuse(self, phi2x: torch.Tensor, fg_prime: torch.Tensor) -> torch.Tensor:
        """Concat each class slice with the transformed guidance and convolve."""
        if phi2x.shape[:2] != fg_prime.shape[:2]:
            raise ValueError(
                f"volume grid {tuple(phi2x.shape[:2])} and guidance grid "
                f"{tuple(fg_prime.shape[:2])} differ"
            )
        if fg_prime.shape[2] != self.guidance_dim:
            raise ValueError(
                f"guidance has {fg_prime.shape[2]} channels, stage expects {self.guidance_dim}"
            )
        h, w, n_c, d = phi2x.shape
        g = fg_prime.permute(2, 0, 1).unsqueeze(0).expand(n_c, -1, -1, -1)
        x = torch.cat([phi2x.permute(2, 3, 0, 1), g], dim=1)  # (N_C, d + d_g, 2H, 2W)
        return self.fuse_conv(x).permute(2, 3, 0, 1)

    def forward(self, phi: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        """phi: (H, W, N_C, d) with guidance at (H, W, guidance_dim)."""
        if guidance.shape[:2] != phi.shape[:2]:
            raise ValueError(
                f"stage guidance {tuple(guidance.shape[:2])} must sit on the stage "
                f"input grid {tuple(phi.shape[:2])}"
            )
        phi2x = self.upsample2x(phi)
        a_sp, a_ch = self.compute_attentions(phi2x.mean(dim=2))
        fg_prime = transform_guidance(guidance, a_sp, a_ch)
        return self.fuse(phi2x, fg_prime)


def _fit_guidance_to_grid(level: torch.Tensor, grid: tuple[int, int], policy: str) -> torch.Tensor:
    """Bring a pyramid level onto a stage input grid.

    Exact sizes pass through; power-of-two smaller maps are nearest-doubled;
    anything else is bilinearly resized under the "auto" policy and rejected
    under "strict".
    """
    h, w = level.shape[:2]
    gh, gw = grid
    while (h, w) != (gh, gw) and gh % h == 0 and gw % w == 0 and gh // h == gw // w \
            and (gh // h) & (gh // h - 1) == 0:
        level = upsample_nearest2x(level)
        h, w = level.shape[:2]
    if (h, w) == (gh, gw):
        return level
    if policy == "strict":
        raise ValueError(
            f"guidance level at {(h, w)} cannot reach stage grid {grid} by doubling"
        )
    return resize_bilinear(level, grid)


class Decoder(nn.Module):
    """Two doubling stages plus the shared per-class logit head."""

    def __init__(self, feat_dim: int, guidance_dims: tuple[int, int],
                 guidance_resize: str = "auto"):
        super().__init__()
        if guidance_resize not in ("auto", "strict"):
            raise ValueError(f"unknown guidance resize policy {guidance_resize!r}")
        self.guidance_resize = guidance_resize
        self.stage1 = DecoderStage(feat_dim, guidance_dims[0])
        self.stage2 = DecoderStage(feat_dim, guidance_dims[1])
        self.head = nn.Conv2d(feat_dim, 1, 3, padding=1)

    def forward(self, phi_dd: torch.Tensor, pyramid: GuidancePyramid, out_px: int) -> torch.Tensor:
        """(H, W, N_C, d) volume -> (out_px, out_px, N_C) logits.

        Stage 1 consumes the level-2 guidance map, stage 2 the level-1 map.
        """
        if phi_dd.ndim != 4:
            raise ValueError(f"expected (H, W, N_C, d) volume, got {tuple(phi_dd.shape)}")
        for level, stage, name in ((pyramid.level2, self.stage1, "level2"),
                                   (pyramid.level1, self.stage2, "level1")):
            if level.shape[2] != stage.guidance_dim:
                raise ValueError(
                    f"{name} has {level.shape[2]} channels, stage expects {stage.guidance_dim}"
                )
        h, w = phi_dd.shape[:2]
        g1 = _fit_guidance_to_grid(pyramid.level2, (h, w), self.guidance_resize)
        x = self.stage1(phi_dd, g1)
        g2 = _fit_guidance_to_grid(pyramid.level1, (2 * h, 2 * w), self.guidance_resize)
        x = self.stage2(x, g2)
        n_c = x.shape[2]
        logits = self.head(x.permute(2, 3, 0, 1)).squeeze(1)  # (N_C, 4H, 4W)
        logits = F.interpolate(logits.unsqueeze(0), size=(out_px, out_px),
                               mode="bilinear", align_corners=False).squeeze(0)
        return logits.permute(1, 2, 0)
