"""Semantic back-projection: reconstruct deep guidance features, score the fit.

The refined correlation volume is flattened class-major per spatial cell and
pushed through three linear layers to predict the deepest guidance feature
map. The loss is the mean squared error against a stop-gradient copy of the
target, so the guidance path never receives gradient. Training-only: the
input width is bound to the training class count.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class BackProjection(nn.Module):
    """Three linear layers mapping (N_C_train * d_phi) to the guidance width."""

    def __init__(self, n_classes_train: int, feat_dim: int, guidance_dim: int,
                 hidden_dim: int | None = None):
        super().__init__()
        if hidden_dim is None:
            hidden_dim = guidance_dim
        self.n_classes_train = n_classes_train
        self.feat_dim = feat_dim
        self.fc1 = nn.Linear(n_classes_train * feat_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, hidden_dim)
        self.fc3 = nn.Linear(hidden_dim, guidance_dim)

    def forward(self, phi_dd: torch.Tensor) -> torch.Tensor:
        """(H, W, N_C_train, d_phi) -> (H, W, d_g3)."""
        if phi_dd.ndim != 4:
            raise ValueError(f"expected (H, W, N_C, d) volume, got {tuple(phi_dd.shape)}")
        h, w, n_c, d = phi_dd.shape
        if n_c != self.n_classes_train or d != self.feat_dim:
            raise ValueError(
                f"volume ({n_c} classes, width {d}) does not match the bound "
                f"({self.n_classes_train} classes, width {self.feat_dim})"
            )
        x = phi_dd.reshape(h, w, n_c * d)
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        return self.fc3(x)


def semantic_loss(psi: torch.Tensor, guidance3: torch.Tensor) -> torch.Tensor:
    """Mean squared error against the detached guidance target.

    The stop-gradient is realized by detaching the target, so the loss trains
    only psi's producers.
    """
    if psi.shape != guidance3.shape:
        raise ValueError(
            f"reconstruction {tuple(psi.shape)} and target {tuple(guidance3.shape)} differ"
        )
    return ((psi - guidance3.detach()) ** 2).mean()
