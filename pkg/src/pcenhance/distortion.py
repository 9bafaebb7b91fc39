"""Synthetic attribute-coding distortion, a stand-in for a real point cloud codec.

Only two codec effects are mimicked: a neighborhood low-pass (half-and-half
blend with the k-NN mean) and uniform scalar quantization. The step follows
the usual video-coding ladder ``2 ** ((qp - 4) / 6)`` and scales a base
interval of a quarter code value. This is a proxy for
producing training/evaluation pairs; it is not G-PCC.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .patches import knn
from .pointcloud_io import PointCloud

QP_LADDER = (51, 46, 40, 34, 28, 22)
# reconstruction levels sit at MID + q * interval, so an interval wider than
# the 8-bit range collapses a channel to mid-gray instead of to 0 / 255
MID = 128.0
# the QP step scales a quarter-code-value base interval (two fractional bits
# of internal precision); unscaled, QP 51 would leave one level in 8 bits
BASE_INTERVAL = 0.25


@dataclass
class DistortionProfile:
    qp: int
    smoothing_k: int = 8
    seed: int = 0  # recorded for provenance; the transform itself is deterministic

    def __post_init__(self):
        if self.qp < 1:
            raise ValueError("qp must be >= 1")
        if self.smoothing_k < 0:
            raise ValueError("smoothing_k must be >= 0")

    @property
    def step(self) -> float:
        return 2.0 ** ((self.qp - 4) / 6.0)

    @property
    def interval(self) -> float:
        """Quantization interval in code values."""
        # 8-bit attributes cannot be coded finer than one code value
        return max(self.step * BASE_INTERVAL, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step"] = self.step
        d["interval"] = self.interval
        return d


def distort(pc: PointCloud, profile: DistortionProfile, neighbors: np.ndarray | None = None) -> PointCloud:
    """Low-pass then quantize every attribute channel; geometry is copied untouched."""
    attrs = pc.attributes.copy()
    if profile.smoothing_k > 1:
        if neighbors is None:
            neighbors = knn(pc.geometry, pc.geometry, min(profile.smoothing_k, len(pc)))
        attrs = 0.5 * attrs + 0.5 * attrs[neighbors].mean(axis=1)
    q = profile.interval
    attrs = np.clip(MID + np.rint((attrs - MID) / q) * q, 0.0, 255.0)
    return PointCloud(pc.geometry.copy(), attrs, pc.color_space)


def quantization_indices(pc_distorted: PointCloud, profile: DistortionProfile) -> np.ndarray:
    return np.rint((pc_distorted.attributes - MID) / profile.interval).astype(np.int64)


def zero_order_entropy(symbols: np.ndarray) -> float:
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def bitrate_proxy(pc_distorted: PointCloud, profile: DistortionProfile) -> float:
    """Bits per input point: sum over channels of the index entropy.

    Each channel costs N * H bits under an ideal zero-order coder, so the
    total divided by N is the sum of the per-channel entropies.
    """
    q = quantization_indices(pc_distorted, profile)
    return float(sum(zero_order_entropy(q[:, c]) for c in range(q.shape[1])))
