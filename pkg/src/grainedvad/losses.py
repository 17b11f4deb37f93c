"""Top-k feature magnitude selection and the training objective.

Magnitudes follow the model dtype. Margins and cross-entropy are accumulated in
float64; gradients flow back into float32 parameters unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass
class LossConfig:
    k: int = 3
    c: float = 100.0
    alpha: float = 1e-4
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.c > 0:
            raise ValueError("margin c must be positive")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def snippet_magnitudes(x: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm of the crop-averaged feature at each snippet.

    ``x`` is ``[..., n_crops, T, C]``; returns ``[..., T]``.
    """
    return x.mean(dim=-3).pow(2).sum(dim=-1)


def select_topk(magnitudes, k: int):
    """Indices of the ``k`` largest magnitudes along the last axis.

    Order is descending magnitude, ties broken by the smaller index. Accepts
    numpy arrays or tensors; selection is never differentiated through.
    """
    T = magnitudes.shape[-1]
    if not 1 <= k <= T:
        raise ValueError(f"k={k} outside 1..{T}")
    if isinstance(magnitudes, torch.Tensor):
        order = torch.sort(magnitudes.detach(), dim=-1, descending=True, stable=True).indices
        return order[..., :k]
    m = np.asarray(magnitudes)
    return np.argsort(-m, axis=-1, kind="stable")[..., :k]


def topk_magnitude(magnitudes, k: int):
    """Mean of the ``k`` largest magnitudes (the video-level feature magnitude)."""
    idx = select_topk(magnitudes, k)
    if isinstance(magnitudes, torch.Tensor):
        return magnitudes.gather(-1, idx).mean(dim=-1)
    return np.take_along_axis(np.asarray(magnitudes), idx, axis=-1).mean(axis=-1)


def margin_loss_pair(m_i, m_j, y_i: int, y_j: int, c: float):
    """Hinge on the magnitude gap; only an (abnormal i, normal j) pair is active."""
    if (y_i, y_j) != (1, 0):
        return 0.0 * (m_i - m_j) if isinstance(m_i, torch.Tensor) else 0.0
    gap = c - (m_i - m_j)
    if isinstance(gap, torch.Tensor):
        return torch.relu(gap)
    return max(0.0, gap)


def batch_margin_loss(m, y, c: float) -> torch.Tensor:
    """Sum of ``margin_loss_pair`` over all ordered pairs of the batch.

    ``m`` holds per-video top-k magnitudes ``[B]``, ``y`` the video labels ``[B]``.
    """
    m = torch.as_tensor(m, dtype=torch.float64) if not isinstance(m, torch.Tensor) else m.double()
    y = torch.as_tensor(y)
    if m.ndim != 1 or y.shape != m.shape:
        raise ValueError("magnitudes and labels must be matching 1-D arrays")
    active = (y[:, None] == 1) & (y[None, :] == 0)
    hinge = torch.relu(c - (m[:, None] - m[None, :]))
    return torch.where(active, hinge, torch.zeros_like(hinge)).sum()


class Classifier(nn.Module):
    """3-layer MLP with ReLU hidden activations and a clamped sigmoid output."""

    def __init__(self, in_dim: int, hidden1: int = 512, hidden2: int = 32, epsilon: float = 1e-8):
        super().__init__()
        self.epsilon = epsilon
        self.fc1 = nn.Linear(in_dim, hidden1)
        self.fc2 = nn.Linear(hidden1, hidden2)
        self.fc3 = nn.Linear(hidden2, 1)

    def logits(self, x):
        return self.fc3(torch.relu(self.fc2(torch.relu(self.fc1(x))))).squeeze(-1)

    def forward(self, x):
        p = torch.sigmoid(self.logits(x))
        # 1 - 1e-8 rounds to 1 in float32, so never clamp tighter than the dtype allows
        eps = max(self.epsilon, torch.finfo(p.dtype).eps)
        return p.clamp(eps, 1 - eps)


def classifier_forward(x, params: Classifier):
    return params(x)


def snippet_ce_loss(topk_scores, y, epsilon: float = 1e-8) -> torch.Tensor:
    """Binary cross-entropy of the top-k snippet scores against the video label,
    summed (not averaged) over snippets and any leading batch axes.

    ``y`` broadcasts against ``topk_scores[..., 0]``.
    """
    p = torch.as_tensor(topk_scores).double().clamp(epsilon, 1 - epsilon)
    y = torch.as_tensor(y, dtype=torch.float64)
    if y.ndim:
        y = y[..., None]
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).sum()


def total_loss(margin_loss, ce_loss, alpha: float):
    return alpha * margin_loss + ce_loss
