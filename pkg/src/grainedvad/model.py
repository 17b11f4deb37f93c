"""End-to-end network: glance-focus, text fusion, two MTNs, FC fusion, classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .data import tile_text_features
from .fusion import MTN, Fusion, concat_multimodal
from .glance_focus import GlanceFocus
from .losses import Classifier, select_topk, snippet_magnitudes


class ShapeError(ValueError):
    """Input shape rejected by one pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class VideoOutput:
    fused: torch.Tensor            # [..., n_crops, T, C_v]
    magnitudes: torch.Tensor       # [..., T]
    topk: torch.Tensor             # [..., k]
    m_k: torch.Tensor              # [...]
    snippet_scores: torch.Tensor   # [..., k]


class GrainedVAD(nn.Module):
    def __init__(self, feature_dim: int, text_dim: int, focus_dim: Optional[int] = None,
                 hidden1: int = 512, hidden2: int = 32, radius: int = 2,
                 dilations=(1, 2, 4), scc_width: int = 3, k: int = 3, epsilon: float = 1e-8):
        super().__init__()
        if feature_dim < 1 or text_dim < 0 or hidden1 < 1 or hidden2 < 1 or k < 1:
            raise ValueError("invalid model dimensions")
        focus_dim = focus_dim or feature_dim
        self.feature_dim = feature_dim
        self.text_dim = text_dim
        self.focus_dim = focus_dim
        self.k = k
        self.glance_focus = GlanceFocus(feature_dim, focus_dim, radius, scc_width)
        self.mtn_v = MTN(feature_dim, dilations)
        self.mtn_gm = MTN(focus_dim + text_dim, dilations)
        self.fusion = Fusion(focus_dim + text_dim, feature_dim)
        self.classifier = Classifier(feature_dim, hidden1, hidden2, epsilon)

    def _stage(self, name, fn, *args):
        try:
            return fn(*args)
        except (ValueError, RuntimeError) as exc:
            if isinstance(exc, ShapeError):
                raise
            raise ShapeError(name, str(exc)) from exc

    def _text_for(self, features: torch.Tensor, text: Optional[torch.Tensor]) -> torch.Tensor:
        *lead, n_crops, T, _ = features.shape
        if self.text_dim == 0:
            return features.new_zeros(*lead, n_crops, T, 0)
        if text is None:
            raise ShapeError("text", f"model expects {self.text_dim}-dim text features")
        if text.shape[-2:] != (T, self.text_dim) or tuple(text.shape[:-2]) != tuple(lead):
            raise ShapeError(
                "text", f"expected text {(*lead, T, self.text_dim)}, got {tuple(text.shape)}"
            )
        if lead:
            return text.unsqueeze(-3).expand(*lead, n_crops, T, self.text_dim)
        return tile_text_features(text, n_crops)

    def fused_features(self, features: torch.Tensor, text: Optional[torch.Tensor] = None):
        """Fused feature ``[..., n_crops, T, D]`` for visual ``[..., n_crops, T, D]``
        and per-snippet text ``[..., T, D_t]``."""
        if features.ndim < 3 or features.shape[-1] != self.feature_dim:
            raise ShapeError(
                "input", f"expected [..., n_crops, T, {self.feature_dim}], got {tuple(features.shape)}"
            )
        f_gf = self._stage("glance_focus", self.glance_focus, features)
        tiled = self._text_for(features, text)
        f_gm = self._stage("concat", concat_multimodal, f_gf, tiled)
        x_v = self._stage("mtn_visual", self.mtn_v, features)
        x_gm = self._stage("mtn_multimodal", self.mtn_gm, f_gm)
        return self._stage("fusion", self.fusion, x_gm, x_v)

    def forward(self, features: torch.Tensor, text: Optional[torch.Tensor] = None) -> VideoOutput:
        fused = self.fused_features(features, text)
        magnitudes = snippet_magnitudes(fused)
        T = magnitudes.shape[-1]
        if self.k > T:
            raise ShapeError("topk", f"k={self.k} exceeds {T} snippets")
        topk = select_topk(magnitudes, self.k)
        m_k = magnitudes.gather(-1, topk).mean(dim=-1)
        pooled = fused.mean(dim=-3)
        picked = pooled.gather(-2, topk.unsqueeze(-1).expand(*topk.shape, pooled.shape[-1]))
        scores = self.classifier(picked)
        return VideoOutput(fused, magnitudes, topk, m_k, scores)

    def snippet_scores(self, features: torch.Tensor, text: Optional[torch.Tensor] = None):
        """Classifier score for every snippet of the crop-averaged fused feature."""
        return self.classifier(self.fused_features(features, text).mean(dim=-3))


def forward_video(model: GrainedVAD, features, text=None) -> VideoOutput:
    return model(features, text)


def reset_parameters(model: nn.Module, seed: int) -> None:
    """Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)] from a seeded generator, biases 0.

    Parameters are visited in registration order so the draw is reproducible.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_in = math.prod(p.shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            draw = torch.rand(p.shape, generator=gen, dtype=torch.float64)
            p.copy_((2 * draw - 1) * bound)
