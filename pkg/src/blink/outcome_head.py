"""Non-negative increment head and monotone accumulation."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class IncrementHead(nn.Module):
    """Two-layer MLP mapping a latent feature to an increment via softplus."""

    def __init__(self, in_dim: int, hidden: int = 128, init_bias: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        # events are sparse: start near zero increments so long rollouts do not drift upward
        nn.init.constant_(self.fc2.bias, init_bias)

    def raw(self, feat: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.elu(self.fc1(feat))).squeeze(-1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.raw(feat))


def mask_first(inc: torch.Tensor) -> torch.Tensor:
    """Zero the increment at the window start (last axis is time)."""
    mask = torch.ones_like(inc)
    mask[..., 0] = 0.0
    return inc * mask


def accumulate(inc):
    """Prefix sums of non-negative increments along the last axis.

    The caller is responsible for zeroing the first increment. Accepts torch
    tensors (differentiable) or array-likes.
    """
    if isinstance(inc, torch.Tensor):
        if torch.any(inc < 0):
            raise ValueError("increments must be non-negative")
        return torch.cumsum(inc, dim=-1)
    arr = np.asarray(inc, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("increments must be non-negative")
    return np.cumsum(arr, axis=-1)


def predict_cumulative(head: IncrementHead, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Increments and cumulative predictions for a (..., T, F) feature sequence."""
    inc = mask_first(head(feats))
    return inc, torch.cumsum(inc, dim=-1)
