"""Visualization of refined correlation features as heatmaps."""
from __future__ import annotations

import matplotlib
import numpy as np
import torch
from PIL import Image

from .backbones import resize_bilinear


def class_magnitude(refined: torch.Tensor, class_index: int) -> torch.Tensor:
    """Per-cell L2 magnitude of one class slice of a (H, W, N_C, d) volume."""
    if refined.ndim != 4:
        raise ValueError(f"expected (H, W, N_C, d) volume, got {tuple(refined.shape)}")
    if not 0 <= class_index < refined.shape[2]:
        raise ValueError(f"class index {class_index} outside {refined.shape[2]} classes")
    return refined[:, :, class_index, :].norm(dim=-1)


def normalize_minmax(m: torch.Tensor) -> torch.Tensor:
    """Scale to [0, 1]; a constant map collapses to zeros."""
    lo, hi = m.min(), m.max()
    if (hi - lo) == 0:
        return torch.zeros_like(m)
    return (m - lo) / (hi - lo)


def render_heatmap(magnitude: torch.Tensor, out_px: int, colormap: str = "viridis") -> np.ndarray:
    """Upsample a magnitude map to out_px and color it; returns (out_px, out_px, 3) uint8."""
    up = resize_bilinear(magnitude.detach().float().unsqueeze(-1), (out_px, out_px)).squeeze(-1)
    norm = normalize_minmax(up).numpy()
    cmap = matplotlib.colormaps[colormap]
    rgba = cmap(norm)
    return (rgba[:, :, :3] * 255.0).round().astype(np.uint8)


def overlay_heatmap(image_rgb: np.ndarray, heat_rgb: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    if image_rgb.shape != heat_rgb.shape:
        raise ValueError("image and heatmap sizes differ")
    mixed = (1.0 - alpha) * image_rgb.astype(np.float64) + alpha * heat_rgb.astype(np.float64)
    return np.clip(mixed.round(), 0, 255).astype(np.uint8)


def save_image(path: str, rgb: np.ndarray) -> None:
    Image.fromarray(rgb).save(path)
