"""Point-cloud geometry: neighbor search, sampling, edge features, augmentation.

Functions accept a single cloud ``(N, F)`` or a batch ``(B, N, F)`` of equally
sized clouds where noted.  Positions are always the first three channels.
Neighbor search and farthest point sampling break ties by lower point index,
so every result is reproducible and checkable against brute force.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, InputError
from .tensor import Tensor, apply_op, as_tensor, reshape


class EdgeVariant(str, enum.Enum):
    """Edge feature layouts: A=(x_i, x_i-x_j), B=(x_i, x_j), C=(x_i, x_j, x_i-x_j)."""

    CENTER_RELATIVE = "a"
    CENTER_NEIGHBOR = "b"
    CENTER_NEIGHBOR_RELATIVE = "c"

    @property
    def multiplier(self) -> int:
        return 3 if self is EdgeVariant.CENTER_NEIGHBOR_RELATIVE else 2


@dataclass
class PointCloud:
    """``data`` is ``(N, F)`` with XYZ in channels 0-2.

    ``labels`` is None, a per-cloud int, or an ``(N,)`` per-point array.
    """

    data: np.ndarray
    labels: int | np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 3:
            raise InputError(f"point cloud must be (N>=1, F>=3), got {self.data.shape}")
        if not np.isfinite(self.data[:, :3]).all():
            raise InputError("point positions must be finite")
        if isinstance(self.labels, np.ndarray) and self.labels.ndim == 1:
            if self.labels.shape[0] != self.data.shape[0]:
                raise InputError("per-point labels must match the point count")
            self.labels = self.labels.astype(np.int64)
        elif self.labels is not None:
            self.labels = int(np.asarray(self.labels).reshape(()))

    @property
    def n_points(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def label_mode(self) -> str:
        if self.labels is None:
            return "none"
        return "point" if isinstance(self.labels, np.ndarray) else "cloud"


@dataclass
class NeighborIndex:
    """Neighbor table: row ``i`` lists the neighbors of point ``centers[i]``."""

    indices: np.ndarray
    centers: np.ndarray
    method: str = "knn"
    k: int = field(init=False)

    def __post_init__(self):
        self.k = self.indices.shape[-1]


def _xyz(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.xyz
    arr = np.asarray(points, dtype=np.float64)
    if arr.shape[-1] < 3:
        raise DimensionError(f"need at least 3 position channels, got shape {arr.shape}")
    return arr[..., :3]


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances ``(..., M, N)`` between ``a (..., M, 3)`` and ``b (..., N, 3)``.

    Computed coordinate-wise (not via the Gram expansion) so that every entry
    is bit-identical to ``dx*dx + dy*dy + dz*dz`` for the same pair.
    """
    d = a[..., :, None, 0] - b[..., None, :, 0]
    out = d * d
    for c in (1, 2):
        d = a[..., :, None, c] - b[..., None, :, c]
        out += d * d
    return out


def _sqdist_rows(center: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Squared distances ``(..., K)`` from ``center (..., 3)`` to ``cand (..., K, 3)``."""
    d = center[..., None, 0] - cand[..., 0]
    out = d * d
    for c in (1, 2):
        d = center[..., None, c] - cand[..., c]
        out += d * d
    return out


def _as_batch(xyz: np.ndarray, centers):
    single = xyz.ndim == 2
    if single:
        xyz = xyz[None]
    b, n, _ = xyz.shape
    if centers is None:
        centers = np.broadcast_to(np.arange(n), (b, n))
    else:
        centers = np.asarray(centers, dtype=np.int64)
        if centers.ndim == 1:
            centers = np.broadcast_to(centers, (b, centers.shape[0])) if not single else centers[None]
    return single, xyz, centers


def _knn_brute(xyz: np.ndarray, centers: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    b, n, _ = xyz.shape
    m = centers.shape[1]
    out = np.empty((b, m, k), dtype=np.int64)
    bidx = np.arange(b)[:, None]
    for s in range(0, m, chunk):
        c = centers[:, s:s + chunk]
        d = pairwise_sqdist(xyz[bidx, c], xyz)
        np.put_along_axis(d, c[..., None], np.inf, axis=-1)
        out[:, s:s + chunk] = _smallest_k(d, k)
    return out


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` smallest entries per row, by (value, index)."""
    n = d.shape[-1]
    if k >= n or 4 * k >= n:
        return np.argsort(d, axis=-1, kind="stable")[..., :k]
    part = np.argpartition(d, k - 1, axis=-1)[..., :k]
    vals = np.take_along_axis(d, part, axis=-1)
    order = np.lexsort((part, vals), axis=-1)
    idx = np.take_along_axis(part, order, axis=-1)
    # a tie at the k-th value may have been resolved against the lower index
    kth = np.take_along_axis(vals, order[..., -1:], axis=-1)
    tied = (d <= kth).sum(axis=-1) > k
    if tied.any():
        idx[tied] = np.argsort(d[tied], axis=-1, kind="stable")[..., :k]
    return idx


def _knn_kdtree(xyz: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """k-d tree candidates re-ranked with the exact brute-force distance and tie-break."""
    b, n, _ = xyz.shape
    out = np.empty((b, centers.shape[1], k), dtype=np.int64)
    for bi in range(b):
        pts = xyz[bi]
        tree = cKDTree(pts)
        todo = np.arange(centers.shape[1])
        m = min(n, k + 9)
        while todo.size:
            c = centers[bi, todo]
            _, cand = tree.query(pts[c], k=m)
            cand = cand.reshape(len(c), m)
            d = _sqdist_rows(pts[c], pts[cand])
            d[cand == c[:, None]] = np.inf
            order = np.lexsort((cand, d), axis=-1)
            cand = np.take_along_axis(cand, order, axis=-1)
            d = np.take_along_axis(d, order, axis=-1)
            kth = d[:, k - 1]
            bound = np.where(np.isinf(d[:, -1]), d[:, -2] if m > 1 else 0.0, d[:, -1])
            # points outside the candidate set are at least as far as the farthest
            # candidate; a strict margin guards the k-d tree's own rounding
            done = (m == n) | (kth < bound * (1.0 - 1e-9))
            out[bi, todo[done]] = cand[done, :k]
            todo = todo[~done]
            m = min(n, 2 * m)
    return out


def knn_search(points, k: int, centers=None, method: str = "brute") -> NeighborIndex:
    """The ``k`` nearest points to each center, self excluded, nearest first.

    ``method="kdtree"`` uses a spatial index and returns exactly the brute-force
    answer (ties broken by lower index).
    """
    xyz = _xyz(points)
    single, bxyz, bcent = _as_batch(xyz, centers)
    n = bxyz.shape[1]
    if not 1 <= k <= n - 1:
        raise InputError(f"k must lie in [1, N-1] = [1, {n - 1}], got {k}")
    if method == "brute":
        idx = _knn_brute(bxyz, bcent, k)
    elif method == "kdtree":
        idx = _knn_kdtree(bxyz, bcent, k)
    else:
        raise ValueError(f"unknown knn method {method!r}")
    if single:
        return NeighborIndex(idx[0], np.asarray(bcent[0]), "knn")
    return NeighborIndex(idx, np.asarray(bcent), "knn")


def radius_search(points, r: float, k: int, centers=None) -> NeighborIndex:
    """Up to ``k`` points within distance ``r``, nearest first.

    Short rows are padded by repeating the nearest in-radius neighbor, or the
    nearest neighbor overall when none lies within ``r``.
    """
    if r <= 0 or k < 1:
        raise InputError(f"radius search needs r > 0 and k >= 1, got r={r}, k={k}")
    xyz = _xyz(points)
    single, bxyz, bcent = _as_batch(xyz, centers)
    b, n, _ = bxyz.shape
    if n < 2:
        raise InputError("radius search needs at least two points")
    bidx = np.arange(b)[:, None]
    d = pairwise_sqdist(bxyz[bidx, bcent], bxyz)
    np.put_along_axis(d, bcent[..., None], np.inf, axis=-1)
    order = np.argsort(d, axis=-1, kind="stable")
    kk = min(k, n - 1)
    idx = order[..., :kk]
    inside = np.take_along_axis(d, idx, axis=-1) <= r * r
    # the first column is always the nearest overall neighbor, in radius or not
    idx = np.where(inside, idx, idx[..., :1])
    if kk < k:
        idx = np.concatenate([idx, np.repeat(idx[..., :1], k - kk, axis=-1)], axis=-1)
    if single:
        return NeighborIndex(idx[0], np.asarray(bcent[0]), "radius")
    return NeighborIndex(idx, np.asarray(bcent), "radius")


def farthest_point_sample(points, m: int) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices, in selection order.

    The first pick is the lowest-index point among those farthest from the
    centroid; ties at every step go to the lowest index.
    """
    xyz = _xyz(points)
    single = xyz.ndim == 2
    if single:
        xyz = xyz[None]
    b, n, _ = xyz.shape
    if not 1 <= m <= n:
        raise InputError(f"m must lie in [1, N] = [1, {n}], got {m}")
    rows = np.arange(b)
    centroid = xyz.mean(axis=1, keepdims=True)
    first = pairwise_sqdist(centroid, xyz)[:, 0].argmax(axis=1)
    out = np.empty((b, m), dtype=np.int64)
    out[:, 0] = first
    mind = _sqdist_rows(xyz[rows, first], xyz)
    mind[rows, first] = -1.0
    for i in range(1, m):
        nxt = mind.argmax(axis=1)
        out[:, i] = nxt
        np.minimum(mind, _sqdist_rows(xyz[rows, nxt], xyz), out=mind)
        mind[rows, nxt] = -1.0
    return out[0] if single else out


def gather_points(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``values[b, idx[b, ...]]`` for batched arrays; plain indexing for single clouds."""
    if idx.ndim == 1 or values.ndim == 2:
        return values[idx]
    bidx = np.arange(values.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return values[bidx, idx]


def edge_features(x: Tensor, centers: np.ndarray, neighbors: np.ndarray,
                  variant: EdgeVariant | str = EdgeVariant.CENTER_RELATIVE) -> Tensor:
    """Differentiable edge features ``(B, M, K, mult*C)`` from point features ``(B, N, C)``.

    ``centers (B, M)`` picks the center of each row, ``neighbors (B, M, K)`` its
    neighbors.  Gradients reach both center and neighbor features.
    """
    variant = EdgeVariant(variant)
    if x.ndim != 3:
        raise DimensionError(f"edge_features expects (B, N, C) features, got {x.shape}")
    b, n, c = x.shape
    if centers.shape[0] != b or neighbors.shape[:2] != centers.shape:
        raise DimensionError(
            f"edge_features: centers {centers.shape} / neighbors {neighbors.shape} vs batch {b}")
    if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= n):
        raise InputError("neighbor index out of range")
    k = neighbors.shape[2]
    bidx = np.arange(b)
    xc = x.data[bidx[:, None], centers]                      # (B, M, C)
    xn = x.data[bidx[:, None, None], neighbors]               # (B, M, K, C)
    xc_k = np.broadcast_to(xc[:, :, None, :], xn.shape)
    if variant is EdgeVariant.CENTER_RELATIVE:
        parts = (xc_k, xc_k - xn)
    elif variant is EdgeVariant.CENTER_NEIGHBOR:
        parts = (xc_k, xn)
    else:
        parts = (xc_k, xn, xc_k - xn)
    out = np.concatenate(parts, axis=-1)

    def bw(g):
        g_center = g[..., :c].sum(axis=2)
        if variant is EdgeVariant.CENTER_RELATIVE:
            g_rel = g[..., c:]
            g_center = g_center + g_rel.sum(axis=2)
            g_nbr = -g_rel
        elif variant is EdgeVariant.CENTER_NEIGHBOR:
            g_nbr = g[..., c:]
        else:
            g_rel = g[..., 2 * c:]
            g_center = g_center + g_rel.sum(axis=2)
            g_nbr = g[..., c:2 * c] - g_rel
        gx = np.zeros((b * n, c), dtype=x.data.dtype)
        off = (bidx * n)
        np.add.at(gx, (centers + off[:, None]).reshape(-1), g_center.reshape(-1, c))
        np.add.at(gx, (neighbors + off[:, None, None]).reshape(-1), g_nbr.reshape(-1, c))
        return (gx.reshape(b, n, c),)

    return apply_op("edge_features", out, (x,), bw)


def build_edge_features(features, neighbors: NeighborIndex,
                        variant: EdgeVariant | str = EdgeVariant.CENTER_RELATIVE) -> Tensor:
    """Edge features ``(M, K, C)`` for a single cloud's ``(N, F)`` features."""
    x = as_tensor(features.data if isinstance(features, PointCloud) else features)
    if x.ndim != 2:
        raise DimensionError(f"expected (N, F) features, got {x.shape}")
    if neighbors.indices.ndim != 2:
        raise DimensionError("build_edge_features takes a single-cloud NeighborIndex")
    x3 = reshape(x, (1,) + x.shape)
    e = edge_features(x3, neighbors.centers[None], neighbors.indices[None], variant)
    return _drop_batch(e)


def _drop_batch(x: Tensor) -> Tensor:
    return reshape(x, x.shape[1:])


def normalize_unit_sphere(cloud):
    """Center positions on their centroid and scale the farthest point to norm 1.

    Accepts a PointCloud (returns a new one) or an ``(N, F)`` array.
    """
    data = cloud.data if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    out = data.copy()
    xyz = out[:, :3] - out[:, :3].mean(axis=0)
    radius = np.sqrt((xyz * xyz).sum(axis=1)).max()
    if radius > 0:
        xyz = xyz / radius
    out[:, :3] = xyz
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.labels)
    return out


@dataclass(frozen=True)
class AugmentParams:
    rotate: bool = True
    scale_range: tuple[float, float] = (0.8, 1.25)
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    up_axis: int = 2

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InputError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.jitter_sigma < 0:
            raise InputError("jitter_sigma must be non-negative")


def _rotation_about(axis: int, theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    i, j = [a for a in range(3) if a != axis]
    rot = np.zeros(theta.shape + (3, 3))
    rot[..., axis, axis] = 1.0
    rot[..., i, i] = c
    rot[..., i, j] = -s
    rot[..., j, i] = s
    rot[..., j, j] = c
    return rot


def augment_batch(points: np.ndarray, rng: np.random.Generator,
                  params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Random up-axis rotation, isotropic scale and clipped Gaussian jitter per cloud."""
    single = points.ndim == 2
    out = np.array(points[None] if single else points, dtype=np.float64)
    b, n, _ = out.shape
    xyz = out[..., :3]
    if params.rotate:
        rot = _rotation_about(params.up_axis, rng.uniform(0.0, 2 * np.pi, size=b))
        xyz = np.einsum("bnj,bij->bni", xyz, rot)
    lo, hi = params.scale_range
    if lo != hi:
        xyz = xyz * rng.uniform(lo, hi, size=(b, 1, 1))
    elif lo != 1.0:
        xyz = xyz * lo
    if params.jitter_sigma > 0:
        noise = rng.normal(0.0, params.jitter_sigma, size=xyz.shape)
        xyz = xyz + np.clip(noise, -params.jitter_clip, params.jitter_clip)
    out[..., :3] = xyz
    return out[0] if single else out


def augment(cloud, rng_seed: int, params: AugmentParams = AugmentParams()):
    """Seeded augmentation of one cloud (PointCloud or ``(N, F)`` array)."""
    rng = np.random.default_rng(rng_seed)
    data = cloud.data if isinstance(cloud, PointCloud) else cloud
    out = augment_batch(np.asarray(data), rng, params)
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.labels)
    return out


def interpolation_weights(coarse_xyz: np.ndarray, fine_xyz: np.ndarray, n_near: int = 3):
    """Indices ``(..., N, q)`` and weights of the ``q = min(3, M)`` nearest coarse points.

    Weights are inverse squared distances normalized to sum 1; a fine point
    that coincides with coarse points takes weight only on those.
    """
    m = coarse_xyz.shape[-2]
    if m < 1:
        raise InputError("need at least one coarse point")
    q = min(n_near, m)
    d = pairwise_sqdist(fine_xyz, coarse_xyz)
    idx = np.argsort(d, axis=-1, kind="stable")[..., :q]
    dq = np.take_along_axis(d, idx, axis=-1)
    exact = dq == 0.0
    with np.errstate(divide="ignore"):
        w = np.where(exact.any(axis=-1, keepdims=True), exact.astype(np.float64), 1.0 / dq)
    w /= w.sum(axis=-1, keepdims=True)
    return idx, w


def weighted_gather(x: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """``out[b, n] = sum_j w[b, n, j] * x[b, idx[b, n, j]]`` with gradient to ``x``."""
    if x.ndim != 3:
        raise DimensionError(f"weighted_gather expects (B, M, C), got {x.shape}")
    b, m, c = x.shape
    bidx = np.arange(b)[:, None, None]
    gathered = x.data[bidx, idx]                               # (B, N, q, C)
    out = (gathered * w[..., None]).sum(axis=2)

    def bw(g):
        gx = np.zeros((b * m, c), dtype=x.data.dtype)
        contrib = g[:, :, None, :] * w[..., None]
        flat = (idx + (np.arange(b) * m)[:, None, None]).reshape(-1)
        np.add.at(gx, flat, contrib.reshape(-1, c))
        return (gx.reshape(b, m, c),)

    return apply_op("weighted_gather", out, (x,), bw)


def interpolate_features(coarse_pts: np.ndarray, coarse_feats, fine_pts: np.ndarray):
    """Inverse-squared-distance interpolation from ``M`` coarse points onto ``N`` fine points.

    Returns an ndarray for ndarray features, a Tensor for Tensor features.
    """
    coarse_pts = _xyz(coarse_pts)
    fine_pts = _xyz(fine_pts)
    idx, w = interpolation_weights(coarse_pts, fine_pts)
    if isinstance(coarse_feats, Tensor):
        if coarse_feats.ndim == 2:
            return _drop_batch(weighted_gather(reshape(coarse_feats, (1,) + coarse_feats.shape), idx[None], w[None]))
        return weighted_gather(coarse_feats, idx, w)
    feats = np.asarray(coarse_feats, dtype=np.float64)
    return (gather_points(feats, idx) * w[..., None]).sum(axis=-2)
