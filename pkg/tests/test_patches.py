import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcenhance.patches import (
    GroupedPatch,
    Patch,
    coverage,
    farthest_point_sampling,
    fuse_patches,
    generate_patches,
    group_patches,
    knn,
    load_patch_archive,
    neighbor_patch_ids,
    patch_size,
    save_patch_archive,
)
from pcenhance.pointcloud_io import PointCloud

from conftest import random_cloud
from oracles import fps_bruteforce, fps_exhaustive, knn_bruteforce


def _line(xs):
    return np.array([[x, 0.0, 0.0] for x in xs])


# --- FPS -------------------------------------------------------------------

def test_fps_collinear():
    assert farthest_point_sampling(_line([0, 1, 2, 10]), 2).tolist() == [0, 3]


def test_fps_collinear_matches_exhaustive_search():
    pts = _line([0, 1, 2, 10])
    for m in range(1, 5):
        assert farthest_point_sampling(pts, m).tolist() == fps_exhaustive(pts.tolist(), m)


def test_fps_single_seed_is_first_index():
    assert farthest_point_sampling(np.random.default_rng(0).normal(size=(9, 3)), 1).tolist() == [0]


def test_fps_exhaustion_visits_everything():
    pts = np.random.default_rng(1).normal(size=(12, 3))
    seeds = farthest_point_sampling(pts, 12)
    assert sorted(seeds.tolist()) == list(range(12))
    assert seeds.tolist() == fps_bruteforce(pts.tolist(), 12)


def test_fps_ties_go_to_lowest_index():
    # four corners at equal distance from the first point's diagonal partner
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [-1, 0, 0], [0, -1, 0]], float)
    assert farthest_point_sampling(pts, 3).tolist() == fps_bruteforce(pts.tolist(), 3)


def test_fps_rejects_bad_m():
    with pytest.raises(ValueError):
        farthest_point_sampling(np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        farthest_point_sampling(np.zeros((3, 3)), 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**31 - 1), st.booleans())
def test_fps_matches_oracle(n, m, seed, grid):
    rng = np.random.default_rng(seed)
    # integer grids produce many exact ties
    pts = rng.integers(0, 4, size=(n, 3)).astype(float) if grid else rng.normal(size=(n, 3))
    m = min(m, n)
    assert farthest_point_sampling(pts, m).tolist() == fps_bruteforce(pts.tolist(), m)


# --- KNN -------------------------------------------------------------------

def test_knn_unit_square():
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    assert knn(corners[:1], corners, 2).tolist() == [[0, 1]]


def test_knn_self_match():
    pts = np.random.default_rng(2).normal(size=(30, 3))
    np.testing.assert_array_equal(knn(pts, pts, 1)[:, 0], np.arange(30))


def test_knn_fifty_points_against_oracle():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 3))
    assert knn(pts, pts, 7).tolist() == knn_bruteforce(pts.tolist(), pts.tolist(), 7)


def test_knn_blocking_does_not_change_result():
    rng = np.random.default_rng(4)
    q, r = rng.integers(0, 3, size=(37, 3)).astype(float), rng.integers(0, 3, size=(25, 3)).astype(float)
    np.testing.assert_array_equal(knn(q, r, 9, block=5), knn(q, r, 9, block=1000))


def test_knn_k_bounds():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        knn(pts, pts, 5)
    with pytest.raises(ValueError):
        knn(pts, pts, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 8), st.integers(0, 2**31 - 1), st.booleans())
def test_knn_matches_oracle(nq, nr, k, seed, grid):
    rng = np.random.default_rng(seed)
    make = (lambda n: rng.integers(0, 3, size=(n, 3)).astype(float)) if grid else (lambda n: rng.normal(size=(n, 3)))
    q, r = make(nq), make(nr)
    k = min(k, nr)
    assert knn(q, r, k).tolist() == knn_bruteforce(q.tolist(), r.tolist(), k)


# --- patches -------------------------------------------------------------

def test_patch_size_formula():
    assert patch_size(8192, 8, 2) == 2048
    assert patch_size(100, 7, 2) == 28


def test_paper_scale_patch_count():
    pc = random_cloud(8192, seed=1)
    patches = generate_patches(pc, 8, 2)
    assert len(patches) == 8 and all(len(p) == 2048 for p in patches)


def test_singleton_patches():
    pc = random_cloud(20, seed=2)
    patches = generate_patches(pc, 20, 1)
    assert all(len(p) == 1 for p in patches)
    assert sorted(p.seed_index for p in patches) == list(range(20))


def test_patches_match_knn_oracle():
    pc = random_cloud(64, seed=5)
    patches = generate_patches(pc, 4, 2)
    seeds = fps_bruteforce(pc.geometry.tolist(), 4)
    assert [p.seed_index for p in patches] == seeds
    for p in patches:
        assert len(p) == 32
        expect = knn_bruteforce([pc.geometry[p.seed_index].tolist()], pc.geometry.tolist(), 32)[0]
        assert p.indices.tolist() == expect
        np.testing.assert_array_equal(p.points[:, :3], pc.geometry[p.indices])
        np.testing.assert_array_equal(p.points[:, 3:], pc.attributes[p.indices])


def test_patch_starts_with_its_seed_even_with_duplicates():
    geo = np.zeros((6, 3))
    geo[3:] = 5.0
    pc = PointCloud(geo, np.zeros((6, 3)))
    for p in generate_patches(pc, 2, 1):
        assert p.indices[0] == p.seed_index
        assert len(set(p.indices.tolist())) == len(p)


def test_patch_too_large_rejected():
    with pytest.raises(ValueError):
        generate_patches(random_cloud(10), 1, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.sampled_from([1.0, 1.5, 2.0]), st.integers(0, 1000))
def test_patch_invariants(n_points, m, ol, seed):
    m = min(m, n_points)
    n = patch_size(n_points, m, ol)
    if n < 1 or n > n_points:
        return
    pc = random_cloud(n_points, seed=seed)
    for p in generate_patches(pc, m, ol):
        assert len(p) == n
        assert len(np.unique(p.indices)) == n
        assert p.indices.min() >= 0 and p.indices.max() < n_points


# --- grouping --------------------------------------------------------------

def _patches_at(xs, n=1):
    return [Patch(points=np.array([[x, 0, 0, 0, 0, 0]] * n, float), indices=np.arange(n), seed_index=i)
            for i, x in enumerate(xs)]


def test_neighbors_on_a_line():
    ids = neighbor_patch_ids(_patches_at(range(7)), 6)
    assert ids[3].tolist() == [2, 4, 1, 5, 0, 6]


def test_neighbors_two_clusters():
    ids = neighbor_patch_ids(_patches_at([0, 0.1, 50, 50.2]), 1)
    assert ids[:, 0].tolist() == [1, 0, 3, 2]


def test_neighbors_exhaustive():
    rng = np.random.default_rng(0)
    patches = _patches_at(rng.normal(size=9))
    ids = neighbor_patch_ids(patches, 8)
    for i, row in enumerate(ids):
        assert sorted(row.tolist()) == [j for j in range(9) if j != i]


def test_num_nei_bounds():
    with pytest.raises(ValueError):
        neighbor_patch_ids(_patches_at(range(3)), 3)


def test_expanded_shape():
    pc = random_cloud(200, seed=4)
    groups = group_patches(generate_patches(pc, 10, 2), 6)
    assert all(g.expanded().shape == (7, 40, 6) for g in groups)
    assert groups[0].expanded_geometry().shape == (280, 3)
    assert groups[0].expanded()[0].tolist() == groups[0].center.points.tolist()


# --- fusion ----------------------------------------------------------------

def test_fuse_average_and_fallback():
    out = fuse_patches([([0, 1], [10.0, 1.0]), ([0], [20.0])], 3, np.array([0.0, 0.0, 42.0]))
    assert out.tolist() == [15.0, 1.0, 42.0]


def test_fuse_permutation_scatter():
    perm = np.random.default_rng(0).permutation(10)
    vals = np.arange(10) * 1.5
    out = fuse_patches([(perm[:4], vals[:4]), (perm[4:], vals[4:])], 10, np.zeros(10))
    np.testing.assert_array_equal(out[perm], vals)


def test_fuse_identity_is_exact():
    rng = np.random.default_rng(1)
    fallback = rng.uniform(0, 255, 50)
    pieces = [(idx, fallback[idx]) for idx in (rng.integers(0, 50, 30) for _ in range(7))]
    np.testing.assert_array_equal(fuse_patches(pieces, 50, fallback), fallback)


def test_fuse_rejects_bad_indices():
    with pytest.raises(ValueError):
        fuse_patches([([5], [1.0])], 3, np.zeros(3))
    with pytest.raises(ValueError):
        fuse_patches([([-1], [1.0])], 3, np.zeros(3))
    with pytest.raises(ValueError):
        fuse_patches([([0, 1], [1.0])], 3, np.zeros(3))


def test_coverage_counts_multiplicity():
    pc = random_cloud(300, seed=8)
    patches = generate_patches(pc, 6, 2)
    cov = coverage(patches, 300)
    assert cov.sum() == 6 * 100


# --- archive ---------------------------------------------------------------

def test_archive_round_trip(tmp_path):
    pc = random_cloud(120, seed=9)
    patches = generate_patches(pc, 6, 2)
    ids = neighbor_patch_ids(patches, 3)
    targets = [pc.attributes[p.indices] + 1 for p in patches]
    save_patch_archive(tmp_path / "a.pcp", patches, ids, 120, targets)
    back, ids2, n_points, t2 = load_patch_archive(tmp_path / "a.pcp")
    assert n_points == 120
    np.testing.assert_array_equal(ids2, ids)
    for a, b, ta, tb in zip(patches, back, targets, t2):
        assert a.seed_index == b.seed_index
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(ta, tb)


def test_archive_without_targets_and_corruption(tmp_path):
    pc = random_cloud(40, seed=1)
    patches = generate_patches(pc, 4, 1)
    path = tmp_path / "b.pcp"
    save_patch_archive(path, patches, neighbor_patch_ids(patches, 2), 40)
    assert load_patch_archive(path)[3] is None
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError, match="trailing"):
        load_patch_archive(path)
    path.write_bytes(b"NOTPATCH" + bytes(30))
    with pytest.raises(ValueError, match="magic"):
        load_patch_archive(path)


def test_grouped_patch_type():
    p = _patches_at([0.0, 1.0], n=2)
    g = GroupedPatch(center=p[0], neighbors=[p[1]])
    assert g.expanded().shape == (2, 2, 6)
