"""Correlation feature refinement: spatial windowed attention, class attention.

Spatial refinement runs two consecutive windowed-attention blocks (plain then
shifted) over the spatial cells of each class slice, with queries and keys
formed from the correlation features concatenated with projected guidance
features; values come from the correlation features alone. Class refinement
runs kernelized linear attention across the class axis at every spatial
position, conditioned the same way on projected text embeddings. A refinement
stack alternates the two, twice by default.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import TextEmbeddingSet


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, d) -> (B * H/ws * W/ws, ws*ws, d), row-major windows."""
    b, h, w, d = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, d)


def window_merge(windows: torch.Tensor, ws: int, b: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition."""
    x = windows.view(b, h // ws, w // ws, ws, ws, -1).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, -1)


def shift_attention_mask(h: int, w: int, ws: int, shift: int,
                         device: torch.device) -> torch.Tensor:
    """Per-window mask blocking attention across cyclic-shift seams.

    Returns (n_windows, ws*ws, ws*ws) with 0 where attention is allowed and
    -inf where the two cells came from different image regions.
    """
    region = torch.zeros(1, h, w, 1, device=device)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for vs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            region[:, hs, vs, :] = cnt
            cnt += 1
    rw = window_partition(region, ws).squeeze(-1)  # (nW, T)
    diff = rw.unsqueeze(1) - rw.unsqueeze(2)
    return torch.where(diff == 0, torch.zeros_like(diff), torch.full_like(diff, float("-inf")))


class WindowedAttention(nn.Module):
    """Multi-head attention within (optionally shifted) square windows.

    Queries and keys are linear maps of concat(tokens, conditioning); values
    are a linear map of the tokens alone. A learned relative position bias
    table is shared across windows.
    """

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"feature dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.q_proj = nn.Linear(2 * dim, dim)
        self.k_proj = nn.Linear(2 * dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        n_rel = (2 * window_size - 1) ** 2
        self.rel_bias = nn.Parameter(torch.zeros(n_rel, num_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

    def _rel_index(self, ws: int, device: torch.device) -> torch.Tensor:
        coords = torch.stack(
            torch.meshgrid(torch.arange(ws, device=device),
                           torch.arange(ws, device=device), indexing="ij")
        ).flatten(1)  # (2, T)
        rel = coords[:, :, None] - coords[:, None, :]  # (2, T, T)
        m = self.window_size
        return (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)

    def effective_window(self, h: int, w: int, shifted: bool) -> tuple[int, int]:
        """Clamp the window to the grid; a window covering the grid never shifts."""
        ws = min(self.window_size, h, w)
        shift = ws // 2 if (shifted and ws < min(h, w)) else 0
        if h % ws != 0 or w % ws != 0:
            raise ValueError(f"grid {h}x{w} not divisible by window size {ws}")
        return ws, shift

    def forward(self, x: torch.Tensor, cond: torch.Tensor, shifted: bool) -> torch.Tensor:
        """x, cond: (B, H, W, dim) -> (B, H, W, dim)."""
        if x.shape != cond.shape:
            raise ValueError(
                f"conditioning map {tuple(cond.shape)} misaligned with tokens {tuple(x.shape)}"
            )
        b, h, w, d = x.shape
        ws, shift = self.effective_window(h, w, shifted)
        if shift > 0:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            cond = torch.roll(cond, shifts=(-shift, -shift), dims=(1, 2))
            mask = shift_attention_mask(h, w, ws, shift, x.device).to(x.dtype)
        else:
            mask = None

        qk_in = torch.cat([x, cond], dim=-1)
        q = window_partition(self.q_proj(qk_in), ws)  # (B*nW, T, d)
        k = window_partition(self.k_proj(qk_in), ws)
        v = window_partition(self.v_proj(x), ws)

        bw, t, _ = q.shape
        hd = d // self.num_heads

        def heads(m: torch.Tensor) -> torch.Tensor:
            return m.view(bw, t, self.num_heads, hd).transpose(1, 2)  # (B*nW, nh, T, hd)

        q, k, v = heads(q), heads(k), heads(v)
        attn = q @ k.transpose(-2, -1) / hd**0.5  # (B*nW, nh, T, T)
        idx = self._rel_index(ws, x.device)
        attn = attn + self.rel_bias[idx].permute(2, 0, 1)  # (nh, T, T) broadcast
        if mask is not None:
            n_win = mask.shape[0]
            attn = attn.view(b, n_win, self.num_heads, t, t) + mask.unsqueeze(0).unsqueeze(2)
            attn = attn.view(bw, self.num_heads, t, t)
        attn = torch.softmax(attn, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, t, d)
        out = self.out_proj(out)
        out = window_merge(out, ws, b, h, w)
        if shift > 0:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm windowed-attention block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, dim: int, window_size: int, num_heads: int,
                 shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowedAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), cond, self.shifted)
        return x + self.mlp(self.norm2(x))


class SpatialRefineBlock(nn.Module):
    """Guidance-conditioned spatial refinement of a correlation volume.

    Each class slice is refined independently with shared weights; the class
    axis rides along as the batch dimension, so the op commutes with any class
    permutation.
    """

    def __init__(self, feat_dim: int, guidance_dim: int, window_size: int = 4,
                 num_heads: int = 4, mlp_ratio: float = 4.0):
        super().__init__()
        self.guide_proj = nn.Linear(guidance_dim, feat_dim)
        self.block1 = SwinBlock(feat_dim, window_size, num_heads, shifted=False, mlp_ratio=mlp_ratio)
        self.block2 = SwinBlock(feat_dim, window_size, num_heads, shifted=True, mlp_ratio=mlp_ratio)

    def forward(self, phi: torch.Tensor, guidance3: torch.Tensor) -> torch.Tensor:
        """phi: (H, W, N_C, d), guidance3: (H, W, d_g3) -> same shape as phi."""
        if phi.ndim != 4:
            raise ValueError(f"expected (H, W, N_C, d) volume, got {tuple(phi.shape)}")
        if guidance3.ndim != 3 or guidance3.shape[:2] != phi.shape[:2]:
            raise ValueError(
                f"guidance {tuple(guidance3.shape)} not aligned to volume grid {tuple(phi.shape[:2])}"
            )
        h, w, n_c, d = phi.shape
        cond = self.guide_proj(guidance3)  # (H, W, d)
        cond = cond.unsqueeze(0).expand(n_c, h, w, d)
        x = phi.permute(2, 0, 1, 3)  # (N_C, H, W, d)
        x = self.block1(x, cond)
        x = self.block2(x, cond)
        return x.permute(1, 2, 0, 3)


class LinearAttention(nn.Module):
    """Multi-head linear attention with the elu(x)+1 kernel, no positions.

    Queries and keys are maps of concat(tokens, conditioning); values come
    from the tokens alone. Cost is linear in token count via the shared
    key-value summary.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"feature dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(2 * dim, dim)
        self.k_proj = nn.Linear(2 * dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """x, cond: (B, N, dim) -> (B, N, dim)."""
        b, n, d = x.shape
        hd = d // self.num_heads
        qk_in = torch.cat([x, cond], dim=-1)

        def heads(m: torch.Tensor) -> torch.Tensor:
            return m.view(b, n, self.num_heads, hd).transpose(1, 2)  # (B, nh, N, hd)

        q = F.elu(heads(self.q_proj(qk_in))) + 1.0
        k = F.elu(heads(self.k_proj(qk_in))) + 1.0
        v = heads(self.v_proj(x))
        kv = k.transpose(-2, -1) @ v  # (B, nh, hd, hd)
        ksum = k.sum(dim=-2)  # (B, nh, hd)
        num = q @ kv  # (B, nh, N, hd)
        den = (q * ksum.unsqueeze(-2)).sum(dim=-1, keepdim=True)  # (B, nh, N, 1)
        out = (num / den).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class ClassRefineBlock(nn.Module):
    """Text-conditioned refinement across the class axis at each position."""

    def __init__(self, feat_dim: int, text_dim: int, num_heads: int = 4,
                 mlp_ratio: float = 4.0):
        super().__init__()
        self.text_proj = nn.Linear(text_dim, feat_dim)
        self.norm1 = nn.LayerNorm(feat_dim)
        self.attn = LinearAttention(feat_dim, num_heads)
        self.norm2 = nn.LayerNorm(feat_dim)
        self.mlp = FeedForward(feat_dim, mlp_ratio)

    def forward(self, phi_prime: torch.Tensor, text: TextEmbeddingSet) -> torch.Tensor:
        """phi_prime: (H, W, N_C, d) -> same shape."""
        h, w, n_c, d = phi_prime.shape
        if text.n_classes != n_c:
            raise ValueError(
                f"volume has {n_c} classes but text embeddings cover {text.n_classes}"
            )
        cond = self.text_proj(text.prompt_averaged.to(phi_prime.dtype))  # (N_C, d)
        cond = cond.unsqueeze(0).expand(h * w, n_c, d)
        x = phi_prime.reshape(h * w, n_c, d)
        x = x + self.attn(self.norm1(x), cond)
        x = x + self.mlp(self.norm2(x))
        return x.reshape(h, w, n_c, d)


class RefinementStack(nn.Module):
    """Alternating spatial and class refinement, applied depth times."""

    def __init__(self, feat_dim: int, guidance_dim: int, text_dim: int, depth: int = 2,
                 window_size: int = 4, num_heads: int = 4, mlp_ratio: float = 4.0):
        super().__init__()
        if depth < 1:
            raise ValueError("refinement stack needs at least one stage")
        self.spatial = nn.ModuleList(
            SpatialRefineBlock(feat_dim, guidance_dim, window_size, num_heads, mlp_ratio)
            for _ in range(depth)
        )
        self.classwise = nn.ModuleList(
            ClassRefineBlock(feat_dim, text_dim, num_heads, mlp_ratio)
            for _ in range(depth)
        )

    @property
    def depth(self) -> int:
        return len(self.spatial)

    def forward(self, phi: torch.Tensor, guidance3: torch.Tensor,
                text: TextEmbeddingSet) -> torch.Tensor:
        for spatial, classwise in zip(self.spatial, self.classwise):
            phi = spatial(phi, guidance3)
            phi = classwise(phi, text)
        return phi
