"""Procedurally textured voxelized surfaces for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .pointcloud_io import ColorSpace, PointCloud, rgb_to_ycbcr


def textured_cloud(seed: int, side: int = 64, amplitude: float = 6.0) -> PointCloud:
    """A side x side voxelized height-field surface with a random color texture.

    Geometry is integer-valued (voxel units). The texture mixes stripes,
    a checkerboard, blobs and a gradient, each with random parameters, so
    clouds share statistics without being copies of each other.
    """
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")
    u, v = u.ravel(), v.ravel()
    fu, fv = rng.uniform(0.03, 0.12, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    z = np.rint(amplitude * np.sin(2 * np.pi * fu * u + phase[0]) * np.cos(2 * np.pi * fv * v + phase[1]))
    geometry = np.stack([u, v, z + amplitude], axis=1)

    channels = []
    for _ in range(3):
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(0.05, 0.25)
        stripes = np.sin(2 * np.pi * freq * (np.cos(angle) * u + np.sin(angle) * v))
        cell = int(rng.integers(4, 12))
        checker = ((u // cell + v // cell) % 2) * 2 - 1
        centers = rng.uniform(0, side, size=(4, 2))
        blobs = sum(
            np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * rng.uniform(4, 10) ** 2)) for cu, cv in centers
        )
        grad = (u * rng.uniform(-1, 1) + v * rng.uniform(-1, 1)) / side
        w = rng.dirichlet(np.ones(4))
        signal = w[0] * stripes + w[1] * checker + w[2] * (2 * blobs - 1) + w[3] * grad
        channels.append(128 + 100 * signal / max(np.abs(signal).max(), 1e-9))
    colors = np.clip(np.rint(np.stack(channels, axis=1)), 0, 255)
    order = rng.permutation(len(geometry))
    return PointCloud(geometry[order], colors[order], ColorSpace.RGB)


def textured_corpus(count: int, seed: int = 0, side: int = 64) -> list[PointCloud]:
    """``count`` YCbCr clouds of side**2 points each."""
    return [rgb_to_ycbcr(textured_cloud(seed * 1000 + i, side)) for i in range(count)]
