"""Exact nearest-neighbour queries.

The tree itself is scipy's ``cKDTree``; this module adds the guarantees the
rest of the package relies on: squared distances recomputed in float64 from
the stored coordinates, and ties broken by the smallest stored index so
results do not depend on tree layout.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, KTooLarge
from .pointcloud_io import PointCloud

# Relative slack used to detect near-ties before falling back to an exact
# radius search.
_TIE_RTOL = 1e-9


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {pts.shape}")
    return pts


def squared_distances(query: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared distance from each query row to each point row."""
    diff = query[..., None, :] - points
    return (diff * diff).sum(axis=-1)


class SpatialIndex:
    """Immutable kd-tree over a snapshot of a point set."""

    def __init__(self, cloud):
        pts = np.array(_as_points(cloud), dtype=np.float64)
        if pts.shape[0] == 0:
            raise EmptyCloud("cannot index an empty cloud")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def _exact_ball(self, q: np.ndarray, r2: float) -> tuple[np.ndarray, np.ndarray]:
        radius = np.sqrt(r2) * (1 + 4 * _TIE_RTOL) + 1e-300
        cand = np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64)
        d2 = squared_distances(q, self.points[cand])
        order = np.lexsort((cand, d2))
        return cand[order], d2[order]

    def knn_many(self, queries, k: int, exclude_self: np.ndarray | None = None):
        """k nearest stored points for each query row.

        ``exclude_self`` optionally gives, per query, a stored index that must
        not appear in the result (used when a cloud is queried against
        itself). Returns ``(indices, squared_distances)`` of shape ``(Q, k)``
        sorted ascending by distance then index.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self)
        extra = 0 if exclude_self is None else 1
        if k < 1:
            raise ValueError("k must be positive")
        if k + extra > n:
            raise KTooLarge(f"k={k} exceeds available points ({n - extra})")
        kk = min(k + extra + 1, n)
        _, idx = self._tree.query(q, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), kk)
        d2 = ((q[:, None, :] - self.points[idx]) ** 2).sum(axis=-1)

        if exclude_self is not None:
            ex = np.asarray(exclude_self, dtype=np.int64).reshape(len(q))
            d2 = np.where(idx == ex[:, None], np.inf, d2)

        order = np.lexsort((idx, d2), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)

        out_idx = idx[:, :k].copy()
        out_d2 = d2[:, :k].copy()
        if kk == n:
            return out_idx, out_d2
        # A row is safe when the first discarded candidate is strictly
        # farther than the k-th kept one; otherwise resolve exactly.
        kth = out_d2[:, -1]
        nxt = d2[:, k] if exclude_self is None else np.min(d2[:, k:], axis=1)
        suspect = ~(nxt > kth * (1 + _TIE_RTOL) + 1e-300)
        for row in np.nonzero(suspect)[0]:
            cand, cd2 = self._exact_ball(q[row], kth[row])
            if exclude_self is not None:
                keep = cand != ex[row]
                cand, cd2 = cand[keep], cd2[keep]
            out_idx[row] = cand[:k]
            out_d2[row] = cd2[:k]
        return out_idx, out_d2

    def nearest_many(self, queries) -> tuple[np.ndarray, np.ndarray]:
        idx, d2 = self.knn_many(queries, 1)
        return idx[:, 0], d2[:, 0]


def build_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def nearest(index: SpatialIndex, query) -> tuple[int, float]:
    idx, d2 = index.nearest_many(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(d2[0])


def knn(index: SpatialIndex, query, k: int, exclude: int | None = None) -> list[tuple[int, float]]:
    ex = None if exclude is None else np.array([exclude])
    idx, d2 = index.knn_many(np.asarray(query, dtype=np.float64).reshape(1, 3), k, exclude_self=ex)
    return [(int(i), float(d)) for i, d in zip(idx[0], d2[0])]


def brute_force_knn(points, queries, k: int, exclude_self=None):
    """All-pairs reference implementation of :meth:`SpatialIndex.knn_many`."""
    pts = _as_points(points)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d2 = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    if exclude_self is not None:
        d2[np.arange(len(q)), np.asarray(exclude_self)] = np.inf
    ids = np.broadcast_to(np.arange(len(pts)), d2.shape)
    order = np.lexsort((ids, d2), axis=-1)[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)
