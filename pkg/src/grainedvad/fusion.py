"""Multi-modal concatenation, multi-scale temporal network and residual FC fusion."""

from __future__ import annotations

import torch
import torch.nn as nn

from .glance_focus import attention, temporal_conv


def concat_multimodal(f_gf: torch.Tensor, f_txt_tiled: torch.Tensor) -> torch.Tensor:
    """Concatenate grained visual and tiled text features along the feature axis."""
    if f_gf.shape[:-1] != f_txt_tiled.shape[:-1]:
        raise ValueError(
            f"cannot concatenate visual {tuple(f_gf.shape)} with text {tuple(f_txt_tiled.shape)}"
        )
    return torch.cat([f_gf, f_txt_tiled.to(f_gf.dtype)], dim=-1)


class DilatedBranch(nn.Module):
    def __init__(self, channels: int, out_channels: int, dilation: int, width: int = 3):
        super().__init__()
        self.dilation = dilation
        self.weight = nn.Parameter(torch.empty(out_channels, channels, width))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    @property
    def receptive_field(self) -> int:
        return (self.weight.shape[-1] - 1) * self.dilation + 1

    def forward(self, x):
        return temporal_conv(x, self.weight, self.bias, self.dilation)


class NonLocalBranch(nn.Module):
    """Self-attention over all ``T`` positions projecting ``C -> C/4``."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.query = nn.Linear(channels, out_channels)
        self.key = nn.Linear(channels, out_channels)
        self.value = nn.Linear(channels, out_channels)

    def forward(self, x):
        return attention(self.query(x), self.key(x), self.value(x))


class MTN(nn.Module):
    """Three dilated temporal convolutions plus a non-local branch, each emitting
    ``C/4`` channels; the four outputs are concatenated back to ``C``.
    """

    def __init__(self, channels: int, dilations=(1, 2, 4), width: int = 3):
        super().__init__()
        if channels % 4:
            raise ValueError(f"MTN channels must be divisible by 4, got {channels}")
        dilations = tuple(int(d) for d in dilations)
        if len(dilations) != 3 or min(dilations) < 1 or list(dilations) != sorted(set(dilations)):
            raise ValueError(f"need three positive, strictly increasing dilations, got {dilations}")
        self.channels = channels
        quarter = channels // 4
        self.dilated = nn.ModuleList(DilatedBranch(channels, quarter, d, width) for d in dilations)
        self.non_local = NonLocalBranch(channels, quarter)

    def forward(self, x):
        if x.shape[-1] != self.channels:
            raise ValueError(f"MTN expects {self.channels} channels, got {x.shape[-1]}")
        outs = [branch(x) for branch in self.dilated]
        outs.append(self.non_local(x))
        return torch.cat(outs, dim=-1)


def mtn_forward(x, params: MTN):
    return params(x)


class Fusion(nn.Module):
    """``FC(x_gm) + x_v`` applied position-wise."""

    def __init__(self, gm_channels: int, v_channels: int):
        super().__init__()
        self.fc = nn.Linear(gm_channels, v_channels)

    def forward(self, x_gm, x_v):
        if x_gm.shape[:-1] != x_v.shape[:-1] or x_v.shape[-1] != self.fc.out_features:
            raise ValueError(f"fusion shape mismatch: {tuple(x_gm.shape)} vs {tuple(x_v.shape)}")
        return self.fc(x_gm) + x_v


def fuse(x_gm, x_v, params: Fusion):
    return params(x_gm, x_v)
