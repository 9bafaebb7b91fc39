"""Patch extraction (FPS seeds + KNN), grouped neighbor patches and fusion.

All neighbor searches are exact Euclidean with ties broken by the lower
reference index, so results are reproducible and can be compared index for
index against a brute-force search.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .pointcloud_io import PointCloud


@dataclass
class Patch:
    points: np.ndarray  # n x 6: geometry then attributes
    indices: np.ndarray  # n source indices into the parent cloud
    seed_index: int

    @property
    def geometry(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def attributes(self) -> np.ndarray:
        return self.points[:, 3:]

    @property
    def seed_point(self) -> np.ndarray:
        return self.points[0, :3]

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class GroupedPatch:
    center: Patch
    neighbors: list = field(default_factory=list)

    def expanded(self) -> np.ndarray:
        """(num_nei + 1) x n x 6 array: the center patch followed by its neighbors."""
        return np.stack([self.center.points] + [p.points for p in self.neighbors])

    def expanded_geometry(self) -> np.ndarray:
        return self.expanded()[:, :, :3].reshape(-1, 3)


def _sq_dists(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - reference[None, :, :]
    return np.einsum("qrd,qrd->qr", diff, diff)


def farthest_point_sampling(geometry: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min seed selection starting from index 0.

    Ties in the max-min distance go to the lowest index.
    """
    geometry = np.asarray(geometry, dtype=np.float64)
    n_points = len(geometry)
    if not 1 <= m <= n_points:
        raise ValueError(f"cannot sample m={m} seeds from {n_points} points")
    seeds = np.empty(m, dtype=np.int64)
    seeds[0] = 0
    diff = geometry - geometry[0]
    min_d = np.einsum("nd,nd->n", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(min_d))  # argmax returns the first maximum
        seeds[i] = nxt
        diff = geometry - geometry[nxt]
        np.minimum(min_d, np.einsum("nd,nd->n", diff, diff), out=min_d)
    return seeds


def _sorted_rows(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row of d, ordered by (value, index)."""
    n_ref = d.shape[1]
    if k == n_ref:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d, part, axis=1).max(axis=1)
    n_within = (d <= kth[:, None]).sum(axis=1)
    # rows without ties at the boundary: the k candidates are exactly the k nearest
    vals = np.take_along_axis(d, part, axis=1)
    order = np.lexsort((part, vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    for row in np.flatnonzero(n_within > k):
        cand = np.flatnonzero(d[row] <= kth[row])
        cand = cand[np.argsort(d[row, cand], kind="stable")]
        out[row] = cand[:k]
    return out


def knn(query: np.ndarray, reference: np.ndarray, k: int, block: int = 512) -> np.ndarray:
    """Q x k indices of the k nearest reference points for every query point.

    Rows are sorted by ascending distance, equal distances by ascending index.
    """
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if not 1 <= k <= len(reference):
        raise ValueError(f"k={k} must be between 1 and the reference size {len(reference)}")
    out = np.empty((len(query), k), dtype=np.int64)
    for start in range(0, len(query), block):
        d = _sq_dists(query[start:start + block], reference)
        out[start:start + block] = _sorted_rows(d, k)
    return out


def patch_size(n_points: int, m: int, ol: float) -> int:
    return int(np.floor(n_points * ol / m))


def generate_patches(pc: PointCloud, m: int, ol: float) -> list[Patch]:
    """Split ``pc`` into ``m`` patches of n = floor(N * ol / m) points each.

    Patch i is FPS seed i followed by its n - 1 nearest neighbors in the whole
    cloud. Points may appear in several patches or in none.
    """
    n_points = len(pc)
    n = patch_size(n_points, m, ol)
    if n < 1:
        raise ValueError(f"patch size N*ol/m = {n_points}*{ol}/{m} is below one point")
    if n > n_points:
        raise ValueError(f"patch size {n} exceeds the cloud size {n_points}")
    seeds = farthest_point_sampling(pc.geometry, m)
    nbrs = knn(pc.geometry[seeds], pc.geometry, n)
    full = np.concatenate([pc.geometry, pc.attributes], axis=1)
    patches = []
    for seed, row in zip(seeds, nbrs):
        if row[0] != seed:
            # a coincident point with a lower index outranked the seed itself
            rest = row[row != seed]
            row = np.concatenate([[seed], rest[: n - 1]])
        patches.append(Patch(points=full[row].copy(), indices=row.copy(), seed_index=int(seed)))
    return patches


def neighbor_patch_ids(patches: list[Patch], num_nei: int) -> np.ndarray:
    """m x num_nei ids of the patches with the nearest seeds (self excluded)."""
    m = len(patches)
    if not 0 <= num_nei < m:
        raise ValueError(f"num_nei={num_nei} must be smaller than the number of patches {m}")
    seeds = np.stack([p.seed_point for p in patches])
    d = _sq_dists(seeds, seeds)
    np.fill_diagonal(d, np.inf)
    if num_nei == 0:
        return np.empty((m, 0), dtype=np.int64)
    return _sorted_rows(d, num_nei)


def group_patches(patches: list[Patch], num_nei: int) -> list[GroupedPatch]:
    ids = neighbor_patch_ids(patches, num_nei)
    return [GroupedPatch(center=p, neighbors=[patches[j] for j in row]) for p, row in zip(patches, ids)]


def fuse_patches(enhanced, n_points: int, fallback: np.ndarray) -> np.ndarray:
    """Scatter enhanced per-patch values back onto the cloud.

    ``enhanced`` is an iterable of ``(indices, values)`` pairs. Points covered
    by several patches get the mean of their values; uncovered points keep
    ``fallback``. The mean is accumulated as an offset from ``fallback`` so a
    point whose every enhanced value equals its fallback is reproduced exactly.
    """
    fallback = np.asarray(fallback, dtype=np.float64).reshape(-1)
    if len(fallback) != n_points:
        raise ValueError(f"fallback has {len(fallback)} entries, expected {n_points}")
    acc = np.zeros(n_points, dtype=np.float64)
    count = np.zeros(n_points, dtype=np.int64)
    for indices, values in enhanced:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(indices) != len(values):
            raise ValueError("indices and values differ in length")
        if len(indices) and (indices.min() < 0 or indices.max() >= n_points):
            raise ValueError(f"patch index out of range for a cloud of {n_points} points")
        np.add.at(acc, indices, values - fallback[indices])
        np.add.at(count, indices, 1)
    out = fallback.copy()
    hit = count > 0
    out[hit] = fallback[hit] + acc[hit] / count[hit]
    return out


def coverage(patches: list[Patch], n_points: int) -> np.ndarray:
    count = np.zeros(n_points, dtype=np.int64)
    for p in patches:
        np.add.at(count, p.indices, 1)
    return count


# --------------------------------------------------------------------------
# patch archive
# --------------------------------------------------------------------------
#
# Little-endian binary stream:
#   header  : magic b"PCPATCH\0", u32 version, u32 n_points_parent, u32 m,
#             u32 n, u32 num_nei, u8 has_target
#   records : m times
#             u32 seed_index
#             u32[n]      indices
#             f64[n * 6]  points (x, y, z, a0, a1, a2) of the distorted cloud
#             f64[n * 3]  target attributes (only when has_target)
#             u32[num_nei] neighbor patch ids

ARCHIVE_MAGIC = b"PCPATCH\0"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIB")


def save_patch_archive(path, patches, groups, n_points, targets=None):
    """Write patches, their neighbor ids and optional target attributes.

    ``groups`` is the m x num_nei array from :func:`neighbor_patch_ids`.
    ``targets`` is a list of n x 3 arrays aligned with ``patches``.
    """
    groups = np.asarray(groups, dtype=np.uint32)
    m = len(patches)
    n = len(patches[0])
    num_nei = groups.shape[1] if groups.ndim == 2 else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, n_points, m, n, num_nei, targets is not None))
        for i, p in enumerate(patches):
            fh.write(struct.pack("<I", p.seed_index))
            fh.write(np.asarray(p.indices, dtype="<u4").tobytes())
            fh.write(np.asarray(p.points, dtype="<f8").tobytes())
            if targets is not None:
                fh.write(np.asarray(targets[i], dtype="<f8").reshape(n, 3).tobytes())
            fh.write(groups[i].astype("<u4").tobytes())


def load_patch_archive(path):
    """Inverse of :func:`save_patch_archive`.

    Returns ``(patches, groups, n_points, targets)``; ``targets`` is None when
    the archive has none.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise ValueError("truncated patch archive")
    magic, version, n_points, m, n, num_nei, has_target = _HEADER.unpack_from(data, 0)
    if magic != ARCHIVE_MAGIC:
        raise ValueError("not a patch archive (bad magic)")
    if version != ARCHIVE_VERSION:
        raise ValueError(f"unsupported patch archive version {version}")
    pos = _HEADER.size
    patches, groups, targets = [], [], []
    for _ in range(m):
        (seed,) = struct.unpack_from("<I", data, pos)
        pos += 4
        idx = np.frombuffer(data, "<u4", n, pos).astype(np.int64)
        pos += 4 * n
        pts = np.frombuffer(data, "<f8", n * 6, pos).reshape(n, 6).copy()
        pos += 8 * n * 6
        if has_target:
            targets.append(np.frombuffer(data, "<f8", n * 3, pos).reshape(n, 3).copy())
            pos += 8 * n * 3
        groups.append(np.frombuffer(data, "<u4", num_nei, pos).astype(np.int64))
        pos += 4 * num_nei
        patches.append(Patch(points=pts, indices=idx, seed_index=int(seed)))
    if pos != len(data):
        raise ValueError(f"patch archive has {len(data) - pos} trailing bytes")
    return patches, np.array(groups, dtype=np.int64).reshape(m, num_nei), n_points, (targets if has_target else None)
