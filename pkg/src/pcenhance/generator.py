"""Graph-attention generator that enhances one attribute channel of a patch.

Data flow for a batch of patches (B patches, n points, k neighbors)::

    attribute (B,1,n)
      -> SCFE: DGA -> DGA, outputs concatenated      (B, 4L', n)
      -> FR -> GRB                                   (B, C, n)      local unit
      -> GFP -> FR -> GRB                            (B, C_out, n)  global unit
      -> FS                                          (B, 1, n)

Tensors follow the Conv2d layout of DGCNN-style code: per-point features are
(B, C, n) and per-edge features (B, C, n, k). Neighbor indices (B, n, k) are
computed once from geometry by :func:`prepare_patch`, never from features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patches import GroupedPatch, knn
from .pointcloud_io import channel_index


@dataclass
class GeneratorConfig:
    k: int = 20
    dga_width: int = 64  # L'; each DGA emits 2L'
    heads: int = 4
    attn_hidden: int = 32
    gfp_width: int = 128  # C, also the width of the local-unit GRB output
    grb_width: int = 128  # output width of the global-unit GRB
    fs_widths: tuple = (128, 64)
    residual_output: bool = True
    batch_norm: bool = True
    gfp_normalized: bool = False
    identity_init: bool = True
    slope: float = 0.2
    attr_scale: float = 255.0

    def __post_init__(self):
        self.fs_widths = tuple(int(w) for w in self.fs_widths)
        if self.k < 2:
            raise ValueError("k must be at least 2")
        widths = [self.dga_width, self.heads, self.attn_hidden, self.gfp_width, self.grb_width, *self.fs_widths]
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fs_widths"] = list(self.fs_widths)
        return d


# --------------------------------------------------------------------------
# graph helpers
# --------------------------------------------------------------------------

def gather_neighbors(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """(B, C, n) features and (B, n, k) indices -> (B, C, n, k)."""
    b, c, n = x.shape
    k = idx.shape[-1]
    flat = idx.reshape(b, 1, -1).expand(b, c, idx.shape[1] * k)
    return x.gather(2, flat).reshape(b, c, idx.shape[1], k)


def graph_features(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Edge features concat(f_i, f_ij - f_i): (B, L, n) -> (B, 2L, n, k)."""
    nbr = gather_neighbors(x, idx)
    center = x.unsqueeze(-1).expand_as(nbr)
    return torch.cat([center, nbr - center], dim=1)


def dgc(features: torch.Tensor, geometry: torch.Tensor, k: int) -> torch.Tensor:
    """Build the geometry KNN graph of one patch and return its edge features.

    ``features`` is n x L, ``geometry`` n x 3; the result is n x k x 2L.
    """
    n = features.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    idx = torch.as_tensor(knn(geometry.detach().cpu().numpy(), geometry.detach().cpu().numpy(), k))
    g = graph_features(features.T.unsqueeze(0), idx.unsqueeze(0))
    return g[0].permute(1, 2, 0)


def graph_attention(logits: torch.Tensor, value: torch.Tensor):
    """Softmax ``logits`` (B, 1, n, k) over k and pool ``value`` (B, C, n, k).

    Returns ``(weights, pooled)`` with pooled of shape (B, C, n).
    """
    weights = torch.softmax(logits, dim=-1)
    return weights, (weights * value).sum(dim=-1)


class GraphConv(nn.Sequential):
    """1x1 Conv2d, optional BatchNorm, LeakyReLU."""

    def __init__(self, cin, cout, batch_norm=True, slope=0.2, act=True):
        layers = [nn.Conv2d(cin, cout, 1, bias=not batch_norm)]
        if batch_norm:
            layers.append(nn.BatchNorm2d(cout))
        if act:
            layers.append(nn.LeakyReLU(slope))
        super().__init__(*layers)


class PointConv(nn.Sequential):
    def __init__(self, cin, cout, batch_norm=True, slope=0.2, act=True):
        layers = [nn.Conv1d(cin, cout, 1, bias=not batch_norm)]
        if batch_norm:
            layers.append(nn.BatchNorm1d(cout))
        if act:
            layers.append(nn.LeakyReLU(slope))
        super().__init__(*layers)


def mlp2d(widths, slope=0.2):
    """Plain pointwise MLP on (B, C, n, k); linear last layer, no normalization."""
    layers = []
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Conv2d(cin, cout, 1))
        if i < len(widths) - 2:
            layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


def _zero_last(seq: nn.Module):
    last = [m for m in seq.modules() if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear))][-1]
    nn.init.zeros_(last.weight)
    if last.bias is not None:
        nn.init.zeros_(last.bias)


# --------------------------------------------------------------------------
# local feature extraction
# --------------------------------------------------------------------------

class MGSA(nn.Module):
    """Multi-head graph self-attention over each point's k neighbors.

    Per head, QUERY and KEY are two graph convs squeezing the edge features to
    one channel, VALUE is one graph conv to L' channels. The head output is the
    softmax(leaky_relu(Q + K))-weighted sum of VALUE over k. Heads are
    concatenated and mixed by a pointwise linear layer to 2L'.
    """

    def __init__(self, cin, width, heads=4, hidden=32, batch_norm=True, slope=0.2):
        super().__init__()
        self.slope = slope
        self.query = nn.ModuleList(
            nn.Sequential(GraphConv(cin, hidden, batch_norm, slope), GraphConv(hidden, 1, batch_norm, slope))
            for _ in range(heads)
        )
        self.key = nn.ModuleList(
            nn.Sequential(GraphConv(cin, hidden, batch_norm, slope), GraphConv(hidden, 1, batch_norm, slope))
            for _ in range(heads)
        )
        self.value = nn.ModuleList(GraphConv(cin, width, batch_norm, slope) for _ in range(heads))
        self.combine = nn.Conv1d(heads * width, 2 * width, 1)

    def forward(self, g, return_weights=False):
        outs, maps = [], []
        for q, k, v in zip(self.query, self.key, self.value):
            logits = F.leaky_relu(q(g) + k(g), self.slope)
            w, pooled = graph_attention(logits, v(g))
            outs.append(pooled)
            maps.append(w)
        out = self.combine(torch.cat(outs, dim=1))
        return (out, maps) if return_weights else out


class DGA(nn.Module):
    def __init__(self, cin, width, heads, hidden, batch_norm=True, slope=0.2):
        super().__init__()
        self.mgsa = MGSA(2 * cin, width, heads, hidden, batch_norm, slope)

    def forward(self, x, idx):
        return self.mgsa(graph_features(x, idx))


class SCFE(nn.Module):
    """Two cascaded DGA blocks; both outputs are concatenated (skip connection)."""

    def __init__(self, cin, width, heads, hidden, batch_norm=True, slope=0.2):
        super().__init__()
        self.dga1 = DGA(cin, width, heads, hidden, batch_norm, slope)
        self.dga2 = DGA(2 * width, width, heads, hidden, batch_norm, slope)
        self.out_channels = 4 * width

    def forward(self, x, idx):
        f1 = self.dga1(x, idx)
        f2 = self.dga2(f1, idx)
        return torch.cat([f1, f2], dim=1)


@torch.no_grad()
def estimate_normals(geometry: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Unit normals (B, 3, n) from the k-neighborhood covariance.

    The normal is the eigenvector of the smallest eigenvalue, flipped into the
    +z hemisphere (then +y, then +x when the previous components vanish). A
    neighborhood with zero covariance gets (0, 0, 1).
    """
    nbr = gather_neighbors(geometry, idx)  # (B, 3, n, k)
    centered = nbr - nbr.mean(dim=-1, keepdim=True)
    pts = centered.permute(0, 2, 3, 1)  # (B, n, k, 3)
    cov = pts.transpose(-1, -2) @ pts / idx.shape[-1]
    evals, evecs = torch.linalg.eigh(cov)
    normal = evecs[..., 0]  # (B, n, 3)
    eps = 1e-12 if normal.dtype == torch.float64 else 1e-6
    sign = torch.ones_like(normal[..., 0])
    decided = torch.zeros_like(sign, dtype=torch.bool)
    for axis in (2, 1, 0):
        comp = normal[..., axis]
        flip = (~decided) & (comp < -eps)
        sign = torch.where(flip, -sign, sign)
        decided = decided | (comp.abs() > eps)
    normal = normal * sign.unsqueeze(-1)
    degenerate = evals[..., -1] <= eps
    up = torch.zeros_like(normal)
    up[..., 2] = 1.0
    normal = torch.where(degenerate.unsqueeze(-1), up, normal)
    return normal.permute(0, 2, 1)


def inverse_distance_weights(dist: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Normalized inverse distances along the last axis."""
    inv = 1.0 / (dist + eps)
    return inv / inv.sum(dim=-1, keepdim=True)


class FR(nn.Module):
    """Feature refinement from normals and distance-weighted neighbor features.

    Normals are concatenated to the input and embedded; the embedding of the
    k - 1 non-self neighbors is averaged with inverse-distance weights; center
    and aggregate are fused and added back to the input.
    """

    def __init__(self, channels, batch_norm=True, slope=0.2):
        super().__init__()
        self.embed = PointConv(channels + 3, channels, batch_norm, slope)
        self.fuse = PointConv(2 * channels, channels, batch_norm, slope)

    def forward(self, x, geometry, idx):
        normals = estimate_normals(geometry, idx).to(x.dtype)
        h = self.embed(torch.cat([x, normals], dim=1))
        nb = idx[..., 1:]
        offsets = gather_neighbors(geometry, nb) - geometry.unsqueeze(-1)
        w = inverse_distance_weights(offsets.norm(dim=1)).to(x.dtype)  # (B, n, k-1)
        agg = (gather_neighbors(h, nb) * w.unsqueeze(1)).sum(dim=-1)
        return x + self.fuse(torch.cat([h, agg], dim=1))


class GRB(nn.Module):
    """Graph residual block: 3 graph convs, residual add, 2 graph convs, max over k."""

    def __init__(self, cin, cout, hidden=None, batch_norm=True, slope=0.2):
        super().__init__()
        hidden = hidden or cout
        self.pre = nn.Sequential(
            GraphConv(cin, hidden, batch_norm, slope),
            GraphConv(hidden, hidden, batch_norm, slope),
            GraphConv(hidden, cin, batch_norm, slope),
        )
        self.post = nn.Sequential(
            GraphConv(cin, hidden, batch_norm, slope),
            GraphConv(hidden, cout, batch_norm, slope),
        )

    def forward(self, g):
        h = self.pre(g)
        if h.shape != g.shape:
            raise ValueError(f"residual operands differ: {tuple(h.shape)} vs {tuple(g.shape)}")
        return self.post(h + g).max(dim=-1).values


# --------------------------------------------------------------------------
# global spatial correlation
# --------------------------------------------------------------------------

def gsce_features(p_i, p_ik, p_ik_exp, dim=1):
    """The 18-dim raw position code: six 3-vectors concatenated along ``dim``."""
    return torch.cat([p_i, p_ik, p_ik_exp, p_i - p_ik, p_i - p_ik_exp, p_i + p_ik - p_ik_exp], dim=dim)


class GSCE(nn.Module):
    def __init__(self, channels, slope=0.2):
        super().__init__()
        self.mlp = mlp2d([18, channels, channels, channels], slope)

    def forward(self, raw):
        return self.mlp(raw)


class GFP(nn.Module):
    """Geometry-guided correction of per-point features.

    For point i with local neighbors F_ik (from the patch) and positional code
    pos_ik built from the local and the expanded (patch plus neighbor patches)
    neighborhoods::

        F_i + sum_k (phi(F_i) + delta(F_ik) + alpha(pos_ik)) * (eps(F_ik) + alpha(pos_ik))

    With ``normalized=True`` the first factor is softmax-normalized over k.
    """

    def __init__(self, channels, slope=0.2, normalized=False):
        super().__init__()
        self.phi = mlp2d([channels, channels, channels], slope)
        self.delta = mlp2d([channels, channels, channels], slope)
        self.eps = mlp2d([channels, channels, channels], slope)
        self.alpha = GSCE(channels, slope)
        self.normalized = normalized

    def zero_init(self):
        for m in (self.phi, self.delta, self.eps, self.alpha):
            _zero_last(m)

    def forward(self, x, geometry, idx, exp_neighbors):
        f_nb = gather_neighbors(x, idx)
        p_i = geometry.unsqueeze(-1).expand(-1, -1, -1, idx.shape[-1])
        p_ik = gather_neighbors(geometry, idx)
        pos = self.alpha(gsce_features(p_i, p_ik, exp_neighbors))
        a = self.phi(x.unsqueeze(-1)) + self.delta(f_nb) + pos
        b = self.eps(f_nb) + pos
        if self.normalized:
            a = torch.softmax(a, dim=-1)
        return x + (a * b).sum(dim=-1)


class FS(nn.Module):
    def __init__(self, cin, widths=(128, 64), batch_norm=True, slope=0.2):
        super().__init__()
        layers, c = [], cin
        for w in widths:
            layers.append(PointConv(c, w, batch_norm, slope))
            c = w
        layers.append(nn.Conv1d(c, 1, 1))
        self.net = nn.Sequential(*layers)

    def zero_init(self):
        _zero_last(self.net)

    def forward(self, x):
        return self.net(x)


# --------------------------------------------------------------------------
# patch inputs
# --------------------------------------------------------------------------

@dataclass
class PatchInput:
    """Network-ready arrays for one patch and one attribute channel."""

    attribute: np.ndarray  # (n,) raw attribute values
    geometry: np.ndarray  # (3, n) patch-normalized coordinates
    idx: np.ndarray  # (n, k) local KNN incl. self
    exp_neighbors: np.ndarray  # (3, n, k) coordinates of the KNN in the expanded patch
    indices: np.ndarray = field(default=None)  # parent-cloud indices


@dataclass
class PatchBatch:
    attribute: torch.Tensor  # (B, n)
    geometry: torch.Tensor  # (B, 3, n)
    idx: torch.Tensor  # (B, n, k)
    exp_neighbors: torch.Tensor  # (B, 3, n, k)

    def __len__(self):
        return self.attribute.shape[0]

    def to(self, dtype):
        return PatchBatch(self.attribute, self.geometry.to(dtype), self.idx, self.exp_neighbors.to(dtype))

    def with_attribute(self, attribute):
        return PatchBatch(attribute, self.geometry, self.idx, self.exp_neighbors)


def prepare_patch(grouped: GroupedPatch, channel, k: int) -> PatchInput:
    """Build the network input of ``grouped.center`` for one channel.

    Coordinates are translated to the seed point and scaled by the patch
    radius; the expanded neighborhood uses the same frame.
    """
    center = grouped.center
    n = len(center)
    if k > n:
        raise ValueError(f"k={k} exceeds the patch size {n}")
    ch = channel if isinstance(channel, int) else channel_index(channel)
    geo = center.geometry
    origin = center.seed_point
    radius = np.linalg.norm(geo - origin, axis=1).max()
    scale = 1.0 / radius if radius > 0 else 1.0
    local = (geo - origin) * scale
    idx = knn(geo, geo, k)
    exp_geo = grouped.expanded_geometry()
    exp_idx = knn(geo, exp_geo, k)
    exp_nbr = (exp_geo[exp_idx] - origin) * scale  # (n, k, 3)
    return PatchInput(
        attribute=center.attributes[:, ch].astype(np.float64),
        geometry=local.T.copy(),
        idx=idx,
        exp_neighbors=exp_nbr.transpose(2, 0, 1).copy(),
        indices=center.indices,
    )


def collate(items, dtype=torch.float32) -> PatchBatch:
    # attributes stay float64 so the residual identity is exact at inference
    return PatchBatch(
        attribute=torch.as_tensor(np.stack([it.attribute for it in items]), dtype=torch.float64),
        geometry=torch.as_tensor(np.stack([it.geometry for it in items]), dtype=dtype),
        idx=torch.as_tensor(np.stack([it.idx for it in items]), dtype=torch.long),
        exp_neighbors=torch.as_tensor(np.stack([it.exp_neighbors for it in items]), dtype=dtype),
    )


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------

class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        cfg = cfg or GeneratorConfig()
        self.cfg = cfg
        bn, s = cfg.batch_norm, cfg.slope
        self.scfe = SCFE(1, cfg.dga_width, cfg.heads, cfg.attn_hidden, bn, s)
        c0 = self.scfe.out_channels
        self.fr1 = FR(c0, bn, s)
        self.grb1 = GRB(2 * c0, cfg.gfp_width, cfg.gfp_width, bn, s)
        self.gfp = GFP(cfg.gfp_width, s, cfg.gfp_normalized)
        self.fr2 = FR(cfg.gfp_width, bn, s)
        self.grb2 = GRB(2 * cfg.gfp_width, cfg.grb_width, cfg.grb_width, bn, s)
        self.fs = FS(cfg.grb_width, cfg.fs_widths, bn, s)
        if cfg.identity_init:
            self.fs.zero_init()

    def zero_output_layers(self):
        """Zero the squeeze output layer and the GFP sub-MLP output layers."""
        self.fs.zero_init()
        self.gfp.zero_init()
        return self

    def delta(self, batch: PatchBatch) -> torch.Tensor:
        """Raw network output (B, n) in normalized attribute units."""
        dtype = next(self.parameters()).dtype
        x = (batch.attribute.to(dtype) / self.cfg.attr_scale - 0.5).unsqueeze(1)
        geo = batch.geometry.to(dtype)
        idx = batch.idx
        f = self.scfe(x, idx)
        f = self.fr1(f, geo, idx)
        f = self.grb1(graph_features(f, idx))
        f = self.gfp(f, geo, idx, batch.exp_neighbors.to(dtype))
        f = self.fr2(f, geo, idx)
        f = self.grb2(graph_features(f, idx))
        return self.fs(f).squeeze(1)

    def forward(self, batch: PatchBatch) -> torch.Tensor:
        """Enhanced attribute (B, n) in raw units, unclamped."""
        # the residual is added in the attribute's own (double) precision
        d = self.delta(batch).to(batch.attribute.dtype) * self.cfg.attr_scale
        if self.cfg.residual_output:
            return batch.attribute + d
        return d + 0.5 * self.cfg.attr_scale

    @torch.no_grad()
    def enhance(self, batch: PatchBatch) -> np.ndarray:
        """Inference helper: float64 result, residual added in double precision."""
        d = self.delta(batch).double() * self.cfg.attr_scale
        base = batch.attribute.double()
        out = base + d if self.cfg.residual_output else d + 0.5 * self.cfg.attr_scale
        return out.cpu().numpy()
