"""WGAN critic scoring the realism of one attribute channel of a patch.

Edge-conv feature extraction over the geometry KNN graph, a self-attention
mixing layer, global max pooling and an MLP to one unbounded score. There is
no batch normalization and no sigmoid, as the gradient penalty requires.
Geometry only defines neighborhoods; the signal scored is the attribute.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .generator import GraphConv, graph_features


@dataclass
class CriticConfig:
    k: int = 20
    widths: tuple = (64, 128)
    mlp_widths: tuple = (128, 64)
    slope: float = 0.2
    attr_scale: float = 255.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if len(self.widths) != 2:
            raise ValueError("critic widths must list the two edge-conv stage widths")
        if min(self.widths + self.mlp_widths) < 1:
            raise ValueError("all widths must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["mlp_widths"] = list(self.mlp_widths)
        return d


class SelfAttention(nn.Module):
    """Non-local attention over all points, blended in by a learned gain (init 0)."""

    def __init__(self, channels):
        super().__init__()
        inner = max(channels // 4, 1)
        self.f = nn.Conv1d(channels, inner, 1)
        self.g = nn.Conv1d(channels, inner, 1)
        self.h = nn.Conv1d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        s = self.f(x).transpose(1, 2) @ self.g(x)  # (B, n, n)
        beta = torch.softmax(s, dim=-1)
        o = self.h(x) @ beta.transpose(1, 2)  # (B, C, n)
        return x + self.gamma * o


class Critic(nn.Module):
    def __init__(self, cfg: CriticConfig | None = None):
        super().__init__()
        cfg = cfg or CriticConfig()
        self.cfg = cfg
        w0, w1 = cfg.widths
        s = cfg.slope
        self.stage1 = nn.Sequential(GraphConv(2, w0, False, s), GraphConv(w0, w0, False, s))
        self.stage2 = nn.Sequential(GraphConv(2 * w0, w1, False, s), GraphConv(w1, w1, False, s))
        self.attention = SelfAttention(w1)
        layers, c = [], w1
        for w in cfg.mlp_widths:
            layers += [nn.Linear(c, w), nn.LeakyReLU(s)]
            c = w
        layers.append(nn.Linear(c, 1))
        self.head = nn.Sequential(*layers)

    def forward(self, attribute: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        """Scores (B,) for attributes (B, n) in raw units and neighbors (B, n, k)."""
        if idx.shape[-1] > attribute.shape[-1]:
            raise ValueError(f"k={idx.shape[-1]} exceeds the number of points {attribute.shape[-1]}")
        dtype = next(self.parameters()).dtype
        x = (attribute.to(dtype) / self.cfg.attr_scale - 0.5).unsqueeze(1)
        f = self.stage1(graph_features(x, idx)).max(dim=-1).values
        f = self.stage2(graph_features(f, idx)).max(dim=-1).values
        f = self.attention(f)
        return self.head(f.max(dim=-1).values).squeeze(-1)
