"""Non-learned geometric operations: sampling, neighbor search, grouping,
centroid distances and interpolation weights.

Every selection breaks distance ties toward the smaller index.
"""
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import kernels
from .dataio import PointCloud

INTERP_EPS = 1e-10


class GeometryError(ValueError):
    pass


def _coords(cloud):
    pts = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"expected an N x 3 point set, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise GeometryError("empty point set")
    return pts


@dataclass
class RegionIndex:
    """Sampled centroids and their nested neighbor lists.

    ``neighbors[t]`` is an M x K_t index matrix; row j lists the K_t nearest
    points of centroid j, nearest first.
    """
    centroid_idx: np.ndarray
    neighbors: List[np.ndarray]
    scales: List[int]

    def __post_init__(self):
        c = np.asarray(self.centroid_idx)
        if len(np.unique(c)) != len(c):
            raise GeometryError("duplicate centroid indices")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise GeometryError(f"scales must be strictly increasing: {self.scales}")
        for k, nb in zip(self.scales, self.neighbors):
            if nb.shape != (len(c), k):
                raise GeometryError(f"scale {k} has neighbor shape {nb.shape}")

    @property
    def num_regions(self):
        return len(self.centroid_idx)


@dataclass
class SimilarityMatrix:
    U: np.ndarray
    V: np.ndarray
    gamma: float


def farthest_point_sampling(cloud, m, start=0):
    pts = _coords(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} out of range")
    return kernels.fps(pts, m, start)


def knn_indices(cloud, query_idx, k):
    """Indices of the k nearest points to each query point, nearest first.

    If k exceeds the cloud size the farthest neighbor is repeated.
    """
    pts = _coords(cloud)
    if k < 1:
        raise GeometryError("k must be >= 1")
    q = np.asarray(query_idx, dtype=np.int64)
    if q.size and (q.min() < 0 or q.max() >= len(pts)):
        raise GeometryError("query index out of range")
    return kernels.knn(pts, pts[q], k)


def group_areas(cloud, centroid_idx, scales):
    scales = [int(k) for k in scales]
    if not scales or any(b <= a for a, b in zip(scales, scales[1:])):
        raise GeometryError(f"scales must be non-empty and strictly increasing: {scales}")
    full = knn_indices(cloud, centroid_idx, scales[-1])
    # a stable sort makes every smaller scale a prefix of the largest one
    return RegionIndex(np.asarray(centroid_idx, dtype=np.int64),
                       [full[:, :k].copy() for k in scales], scales)


def to_relative(cloud, region):
    """Per-scale neighbor coordinates expressed relative to their centroid."""
    pts = _coords(cloud)
    centers = pts[region.centroid_idx][:, None, :]
    return [pts[nb] - centers for nb in region.neighbors]


def pairwise_sqdist(points):
    pts = _coords(points)
    return kernels.sqdist(pts, pts)


def similarity_matrix(U, gamma):
    if gamma < 0:
        raise GeometryError("gamma must be >= 0")
    U = np.asarray(U, dtype=np.float64)
    return SimilarityMatrix(U, np.exp(-gamma * U), float(gamma))


def interp_weights(targets, sources, k=3, eps=INTERP_EPS):
    """Inverse squared distance weights over the k nearest sources.

    Returns (idx [A, k], w [A, k]). A target closer than sqrt(eps) to its
    nearest source copies that source: weight 1 there, 0 elsewhere. When
    there are fewer than k sources the extra slots repeat the last neighbor
    with weight 0.
    """
    tgt = _coords(targets)
    src = _coords(sources)
    if k < 1:
        raise GeometryError("k must be >= 1")
    kk = min(k, len(src))
    idx = kernels.knn(src, tgt, kk)
    d = src[idx] - tgt[:, None, :]
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    hit = d2[:, 0] < eps
    inv = 1.0 / np.where(hit[:, None], 1.0, d2)
    w = inv / inv.sum(axis=1, keepdims=True)
    w[hit] = 0.0
    w[hit, 0] = 1.0
    if kk < k:
        idx = np.concatenate([idx, np.repeat(idx[:, -1:], k - kk, axis=1)], axis=1)
        w = np.concatenate([w, np.zeros((len(w), k - kk))], axis=1)
    return idx, w


def interp_weights_batch(targets, sources, k=3, eps=INTERP_EPS):
    """Batched form: targets [B, A, 3], sources [B, S, 3]."""
    out = [interp_weights(t, s, k, eps) for t, s in zip(targets, sources)]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])
