import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shufflepoint import tensor as T
from shufflepoint.errors import InputError
from shufflepoint.geometry import (AugmentParams, EdgeVariant, PointCloud, augment,
                                   build_edge_features, edge_features, farthest_point_sample,
                                   interpolate_features, interpolation_weights, knn_search,
                                   normalize_unit_sphere, pairwise_sqdist, radius_search)
from shufflepoint.tensor import Tensor, backward


def knn_oracle(xyz, k):
    """Plain-loop nearest neighbors sorted by (squared distance, index)."""
    n = len(xyz)
    rows = []
    for i in range(n):
        d = [(float(((xyz[i] - xyz[j]) ** 2).sum()), j) for j in range(n) if j != i]
        d.sort()
        rows.append([j for _, j in d[:k]])
    return np.array(rows)


def fps_step_oracle(xyz, picks):
    """Assert every pick after the first maximizes the min distance to earlier picks."""
    d = ((xyz[:, None] - xyz[None]) ** 2).sum(-1)
    for i in range(1, len(picks)):
        mind = d[:, picks[:i]].min(axis=1)
        mind[picks[:i]] = -1
        best = mind.max()
        assert mind[picks[i]] == best
        assert picks[i] == np.flatnonzero(mind == best)[0]


# -- PointCloud --------------------------------------------------------------


def test_point_cloud_validation():
    with pytest.raises(InputError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(InputError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(InputError):
        PointCloud(np.zeros((3, 3)), np.zeros(2, dtype=int))
    c = PointCloud(np.zeros((3, 4)), np.array([1, 2, 3]))
    assert (c.n_points, c.n_channels, c.label_mode) == (3, 4, "point")
    assert PointCloud(np.zeros((3, 3)), 5).label_mode == "cloud"


# -- k nearest neighbors --------------------------------------------------------


def test_knn_line_hand_case():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    np.testing.assert_array_equal(knn_search(pts, 1).indices, [[1], [0], [1]])


def test_knn_full_rows_are_permutations(rng):
    pts = rng.normal(size=(12, 3))
    idx = knn_search(pts, 11).indices
    for i, row in enumerate(idx):
        assert sorted(row) == [j for j in range(12) if j != i]


@pytest.mark.parametrize("method", ["brute", "kdtree"])
def test_knn_matches_oracle_on_1000_points(method):
    pts = np.random.default_rng(5).uniform(size=(1000, 3))
    idx = knn_search(pts, 20, method=method).indices
    np.testing.assert_array_equal(idx, knn_oracle(pts, 20))


@pytest.mark.parametrize("method", ["brute", "kdtree"])
def test_knn_ties_go_to_lower_index(method):
    # integer grid: many equal distances
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    pts = g[np.random.default_rng(0).permutation(len(g))]
    idx = knn_search(pts, 10, method=method).indices
    np.testing.assert_array_equal(idx, knn_oracle(pts, 10))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31), st.data())
def test_knn_rows_sorted_and_exclude_self(n, seed, data):
    k = data.draw(st.integers(1, n - 1))
    pts = np.random.default_rng(seed).integers(0, 3, size=(n, 3)).astype(float)
    nb = knn_search(pts, k)
    d = pairwise_sqdist(pts, pts)
    for i, row in enumerate(nb.indices):
        assert i not in row and len(set(row)) == k
        assert (np.diff(d[i, row]) >= 0).all()
    np.testing.assert_array_equal(knn_search(pts, k, method="kdtree").indices, nb.indices)


def test_knn_rejects_bad_k(rng):
    pts = rng.normal(size=(5, 3))
    for k in (0, 5):
        with pytest.raises(InputError):
            knn_search(pts, k)


def test_knn_uses_positions_only(rng):
    pts = rng.normal(size=(30, 3))
    extra = np.hstack([pts, rng.normal(size=(30, 4)) * 100])
    np.testing.assert_array_equal(knn_search(pts, 5).indices, knn_search(extra, 5).indices)


def test_knn_batched_with_centers(rng):
    pts = rng.normal(size=(3, 40, 3))
    centers = np.stack([rng.permutation(40)[:10] for _ in range(3)])
    nb = knn_search(pts, 6, centers)
    for b in range(3):
        full = knn_oracle(pts[b], 6)
        np.testing.assert_array_equal(nb.indices[b], full[centers[b]])


# -- radius search ------------------------------------------------------------


def test_radius_wider_than_cloud_equals_knn(rng):
    pts = rng.uniform(-1, 1, size=(50, 3))
    np.testing.assert_array_equal(radius_search(pts, 10.0, 8).indices, knn_search(pts, 8).indices)


def test_radius_too_small_pads_with_nearest(rng):
    pts = rng.uniform(-1, 1, size=(30, 3))
    nn = knn_search(pts, 1).indices
    idx = radius_search(pts, 1e-6, 5).indices
    np.testing.assert_array_equal(idx, np.repeat(nn, 5, axis=1))


def test_radius_matches_oracle_on_clusters():
    rng = np.random.default_rng(3)
    centers = np.array([[0.0, 0, 0], [5, 0, 0], [0, 5, 0]])
    pts = np.concatenate([c + rng.normal(scale=0.2, size=(15, 3)) for c in centers])
    r, k = 0.5, 12
    idx = radius_search(pts, r, k).indices
    d = pairwise_sqdist(pts, pts)
    for i, row in enumerate(idx):
        order = [j for j in np.argsort(d[i], kind="stable") if j != i]
        inside = [j for j in order if d[i, j] <= r * r][:k]
        pad = inside[0] if inside else order[0]
        assert list(row) == inside + [pad] * (k - len(inside))


# -- farthest point sampling ----------------------------------------------------


def test_fps_collinear_picks_endpoints():
    pts = np.zeros((8, 3))
    pts[:, 0] = np.arange(8)
    assert set(farthest_point_sample(pts, 2)) == {0, 7}


def test_fps_all_points(rng):
    pts = rng.normal(size=(20, 3))
    picks = farthest_point_sample(pts, 20)
    assert sorted(picks) == list(range(20))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31), st.data())
def test_fps_greedy_max_min(n, seed, data):
    m = data.draw(st.integers(1, n))
    pts = np.random.default_rng(seed).integers(-3, 4, size=(n, 3)).astype(float)
    picks = farthest_point_sample(pts, m)
    c = pts.mean(0)
    dc = ((pts - c) ** 2).sum(1)
    assert picks[0] == np.flatnonzero(dc == dc.max())[0]
    fps_step_oracle(pts, picks)


def test_fps_geometric_set_invariant_to_order(rng):
    pts = rng.normal(size=(40, 3))
    perm = rng.permutation(40)
    a = farthest_point_sample(pts, 10)
    b = farthest_point_sample(pts[perm], 10)
    np.testing.assert_array_equal(perm[b], a)


def test_fps_batched_matches_single(rng):
    pts = rng.normal(size=(3, 30, 3))
    batched = farthest_point_sample(pts, 7)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], farthest_point_sample(pts[i], 7))


# -- edge features --------------------------------------------------------------


def _nb(indices):
    from shufflepoint.geometry import NeighborIndex

    indices = np.asarray(indices)
    return NeighborIndex(indices, np.arange(len(indices)))


def test_edge_variant_a_hand_value():
    x = np.array([[1.0, 0, 0], [0, 1, 0]])
    e = build_edge_features(x, _nb([[1], [0]]), "a").data
    np.testing.assert_array_equal(e[0, 0], [1, 0, 0, 1, -1, 0])


def test_edge_variant_a_coincident_neighbor():
    x = np.array([[0.3, 0.2, 0.1], [0.3, 0.2, 0.1]])
    e = build_edge_features(x, _nb([[1], [0]]), "a").data
    assert not e[..., 3:].any()


@pytest.mark.parametrize("variant,mult", [("a", 2), ("b", 2), ("c", 3)])
def test_edge_channel_counts(rng, variant, mult):
    x = rng.normal(size=(20, 5))
    e = build_edge_features(x, knn_search(x, 4), variant)
    assert e.shape == (20, 4, 5 * mult)
    assert EdgeVariant(variant).multiplier == mult


def test_edge_variant_layouts(rng):
    x = rng.normal(size=(6, 3))
    nb = knn_search(x, 2)
    xi = np.repeat(x[:, None], 2, axis=1)
    xj = x[nb.indices]
    np.testing.assert_array_equal(build_edge_features(x, nb, "b").data, np.concatenate([xi, xj], -1))
    np.testing.assert_array_equal(build_edge_features(x, nb, "c").data,
                                  np.concatenate([xi, xj, xi - xj], -1))


def test_edge_relative_halves_cancel_on_reverse_edges(rng):
    x = rng.normal(size=(10, 3))
    nb = knn_search(x, 3)
    e = build_edge_features(x, nb, "a").data
    for i in range(10):
        for a, j in enumerate(nb.indices[i]):
            back = np.flatnonzero(nb.indices[j] == i)
            if back.size:
                np.testing.assert_array_equal(e[i, a, 3:] + e[j, back[0], 3:], 0.0)


def test_edge_gradient_reaches_centers_and_neighbors():
    x = Tensor(np.zeros((1, 3, 1)), requires_grad=True)
    e = edge_features(x, np.array([[0]]), np.array([[[1, 2]]]), "a")
    backward(T.tsum(e))
    # center appears twice in each of two edges, neighbors once with minus sign
    np.testing.assert_array_equal(x.grad[0, :, 0], [4.0, -1.0, -1.0])


def test_edge_index_out_of_range():
    with pytest.raises(InputError):
        edge_features(Tensor(np.zeros((1, 3, 2))), np.array([[0]]), np.array([[[3]]]))


# -- normalization and augmentation ---------------------------------------------


def test_normalize_random_cloud(rng):
    out = normalize_unit_sphere(rng.normal(size=(100, 3)) * 7 + 3)
    assert np.abs(out.mean(0)).max() < 1e-12
    assert abs(np.linalg.norm(out, axis=1).max() - 1.0) < 1e-12


def test_normalize_idempotent(rng):
    once = normalize_unit_sphere(rng.normal(size=(50, 3)))
    np.testing.assert_allclose(normalize_unit_sphere(once), once, atol=1e-12)


def test_normalize_single_point_goes_to_origin():
    out = normalize_unit_sphere(PointCloud(np.array([[4.0, -2.0, 9.0]]), 3))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])
    assert out.labels == 3


def test_augment_identity_params(rng):
    pts = rng.normal(size=(30, 3))
    p = AugmentParams(rotate=False, scale_range=(1.0, 1.0), jitter_sigma=0.0)
    np.testing.assert_array_equal(augment(pts, 0, p), pts)


def test_augment_rotation_is_isometry(rng):
    pts = rng.normal(size=(30, 3))
    out = augment(pts, 7, AugmentParams(scale_range=(1.0, 1.0), jitter_sigma=0.0))
    np.testing.assert_allclose(pairwise_sqdist(out, out), pairwise_sqdist(pts, pts), atol=1e-9)
    np.testing.assert_allclose(out[:, 2], pts[:, 2], atol=1e-12)


def test_augment_same_seed_bit_identical(rng):
    pts = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(augment(pts, 11), augment(pts, 11))
    assert not np.array_equal(augment(pts, 11), augment(pts, 12))


def test_augment_jitter_clipped(rng):
    pts = np.zeros((2000, 3))
    p = AugmentParams(rotate=False, scale_range=(1.0, 1.0), jitter_sigma=0.5, jitter_clip=0.05)
    assert np.abs(augment(pts, 1, p)).max() <= 0.05


def test_augment_params_validated():
    with pytest.raises(InputError):
        AugmentParams(scale_range=(1.2, 0.8))
    with pytest.raises(InputError):
        AugmentParams(jitter_sigma=-1)


# -- interpolation ------------------------------------------------------------


def test_interpolation_midpoint():
    coarse = np.array([[0.0, 0, 0], [1, 0, 0]])
    out = interpolate_features(coarse, np.array([[0.0], [1.0]]), np.array([[0.5, 0, 0]]))
    assert out[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_interpolation_coincident_point_copies(rng):
    coarse = rng.normal(size=(6, 3))
    feats = rng.normal(size=(6, 4))
    out = interpolate_features(coarse, feats, coarse[[2, 4]])
    np.testing.assert_array_equal(out, feats[[2, 4]])


def test_interpolation_partition_of_unity(rng):
    coarse, fine = rng.normal(size=(8, 3)), rng.normal(size=(50, 3))
    out = interpolate_features(coarse, np.full((8, 2), 3.25), fine)
    np.testing.assert_allclose(out, 3.25, rtol=1e-14)
    _, w = interpolation_weights(coarse, fine)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_interpolation_fewer_than_three_coarse(rng):
    idx, w = interpolation_weights(rng.normal(size=(2, 3)), rng.normal(size=(5, 3)))
    assert idx.shape == (5, 2) and w.shape == (5, 2)


def test_interpolation_tensor_path_matches_array(rng):
    coarse, fine = rng.normal(size=(5, 3)), rng.normal(size=(9, 3))
    feats = rng.normal(size=(5, 4))
    a = interpolate_features(coarse, feats, fine)
    b = interpolate_features(coarse, Tensor(feats), fine).data
    np.testing.assert_allclose(a, b, rtol=1e-14)
