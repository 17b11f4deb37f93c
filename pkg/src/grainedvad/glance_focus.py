"""Glance-focus network producing grained visual features.

All blocks take features shaped ``[..., T, C]``: any leading axes (crops, batch)
are treated independently, attention and convolution run over the ``T`` axis.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def _fold(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    lead = tuple(x.shape[:-2])
    return x.reshape(-1, *x.shape[-2:]), lead


def temporal_conv(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor],
                  dilation: int = 1) -> torch.Tensor:
    """Same-padded 1-D convolution over ``T`` of ``x`` shaped ``[..., T, C_in]``.

    ``weight`` is ``[C_out, C_in, w]`` with odd ``w``.
    """
    width = weight.shape[-1]
    if width % 2 != 1:
        raise ValueError(f"kernel width must be odd, got {width}")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {weight.shape[1]}")
    flat, lead = _fold(x)
    pad = dilation * (width // 2)
    out = F.conv1d(flat.transpose(1, 2), weight, bias, padding=pad, dilation=dilation)
    return out.transpose(1, 2).reshape(*lead, x.shape[-2], weight.shape[0])


def scc_forward(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
    """Short-cut convolution: ``x + conv_T(x)`` with a channel-preserving kernel."""
    if kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"short-cut kernel must map C -> C, got {tuple(kernel.shape[:2])}")
    return x + temporal_conv(x, kernel, bias)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              radius: Optional[int] = None) -> torch.Tensor:
    """Scaled dot-product attention over the ``T`` axis.

    With ``radius`` set, position ``t`` only attends to positions within
    ``radius`` of it. A radius of ``T - 1`` or more leaves the mask empty and the
    result is identical to full attention.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    T = scores.shape[-1]
    if radius is not None and radius < T - 1:
        idx = torch.arange(T, device=scores.device)
        far = (idx[:, None] - idx[None, :]).abs() > radius
        scores = scores.masked_fill(far, float("-inf"))
    # softmax subtracts the row max internally, so large inputs stay finite
    return torch.softmax(scores, dim=-1) @ v


class ShortcutConv(nn.Module):
    def __init__(self, channels: int, width: int = 3):
        super().__init__()
        if width % 2 != 1:
            raise ValueError("short-cut convolution width must be odd")
        self.weight = nn.Parameter(torch.empty(channels, channels, width))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return scc_forward(x, self.weight, self.bias)


class SelfAttention(nn.Module):
    """Single-head self-attention with output projection; optionally windowed."""

    def __init__(self, dim: int, radius: Optional[int] = None):
        super().__init__()
        self.radius = radius
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        return self.out(attention(self.query(x), self.key(x), self.value(x), self.radius))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class GlanceBlock(nn.Module):
    """Short-cut conv, then clip-level transformer (global attention + GeLU FFN).

    No positional encoding: with the short-cut kernel zeroed the block is
    equivariant to permutations of the clips.
    """

    def __init__(self, dim: int, hidden: Optional[int] = None, scc_width: int = 3):
        super().__init__()
        self.scc = ShortcutConv(dim, scc_width)
        self.attn = SelfAttention(dim)
        self.ffn = FeedForward(dim, hidden or 4 * dim)

    def forward(self, x):
        h = self.scc(x)
        h = h + self.attn(h)
        return h + self.ffn(h)


class FocusBlock(nn.Module):
    """Channel expansion (1x1 conv), short-cut conv, windowed self-attention, FFN."""

    def __init__(self, in_dim: int, out_dim: int, radius: int = 2,
                 hidden: Optional[int] = None, scc_width: int = 3):
        super().__init__()
        if radius < 0:
            raise ValueError("attention radius must be >= 0")
        self.expand = nn.Linear(in_dim, out_dim)
        self.scc = ShortcutConv(out_dim, scc_width)
        self.sac = SelfAttention(out_dim, radius=radius)
        self.ffn = FeedForward(out_dim, hidden or 4 * out_dim)

    @property
    def radius(self) -> int:
        return self.sac.radius

    def forward(self, g):
        h = self.scc(self.expand(g))
        h = h + self.sac(h)
        return h + self.ffn(h)


class GlanceFocus(nn.Module):
    """Glance block followed by focus block; ``[..., T, D] -> [..., T, D_f]``."""

    def __init__(self, dim: int, focus_dim: Optional[int] = None, radius: int = 2,
                 scc_width: int = 3):
        super().__init__()
        focus_dim = focus_dim or dim
        self.dim = dim
        self.focus_dim = focus_dim
        self.glance = GlanceBlock(dim, 4 * dim, scc_width)
        self.focus = FocusBlock(dim, focus_dim, radius, 4 * focus_dim, scc_width)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"glance-focus expects {self.dim} channels, got {x.shape[-1]}")
        return self.focus(self.glance(x))


def glance_block(x, params: GlanceBlock):
    return params(x)


def focus_block(g, params: FocusBlock):
    return params(g)


def glance_focus_forward(features, params: GlanceFocus):
    """Grained visual feature for ``[n_crops, T, D]`` input; crops are independent."""
    return params(features)
