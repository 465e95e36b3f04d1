"""Projection head over the cluster vocabulary and the masked-prediction loss
(negative mean log-likelihood over masked frames)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError


@dataclass
class SSLLoss:
    value: float
    masked_count: int


class Projection(nn.Module):
    """Linear map from encoder features to C cluster logits."""

    def __init__(self, d: int, n_clusters: int):
        super().__init__()
        self.linear = nn.Linear(d, n_clusters)
        nn.init.normal_(self.linear.weight, mean=0.0, std=0.02)
        nn.init.zeros_(self.linear.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features)


def ssl_logits(features: torch.Tensor, proj: Projection) -> torch.Tensor:
    return proj(features)


def ssl_loss_from_logits(
    logits: torch.Tensor,  # (T, C)
    targets: torch.Tensor,  # (T,) long
    mask_indices: torch.Tensor,  # (m,) long
) -> torch.Tensor:
    """-(1/|M|) sum_{t in M} log softmax(logits_t)[z_t], log-sum-exp stable.

    Differentiable; only masked rows contribute.
    """
    if mask_indices.numel() == 0:
        raise DataError("ssl_loss called with an empty mask set")
    log_probs = torch.log_softmax(logits[mask_indices], dim=-1)
    picked = log_probs.gather(1, targets[mask_indices][:, None]).squeeze(1)
    return -picked.mean()


def ssl_loss(logits: np.ndarray, targets: np.ndarray, mask_indices: np.ndarray) -> SSLLoss:
    """Non-differentiable convenience wrapper returning the loss record."""
    t_logits = torch.as_tensor(logits, dtype=torch.float64)
    t_targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    t_mask = torch.as_tensor(np.asarray(mask_indices), dtype=torch.long)
    value = ssl_loss_from_logits(t_logits, t_targets, t_mask)
    return SSLLoss(value=float(value), masked_count=int(t_mask.numel()))
