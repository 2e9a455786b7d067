"""Sampling, grouping and neighbour search on point sets.

All searches are brute force and break ties canonically: by distance, then by
the lexicographic order of the candidate's (x, y, z) coordinates, then by
index. The result therefore depends only on the geometry, never on the input
order of the points, which is what makes the whole network permutation
invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, matmul

INTERP_EPS = 1e-8


@dataclass
class PointCloud:
    """``coords`` is (N, 3); ``attrs`` is (N, a) with a possibly 0."""

    coords: np.ndarray
    attrs: np.ndarray | None = None
    point_labels: np.ndarray | None = None
    cloud_label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise ShapeError(f"coords must be (N>=1, 3), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ContractError("point coordinates must be finite")
        n = self.coords.shape[0]
        if self.attrs is None:
            self.attrs = np.zeros((n, 0))
        self.attrs = np.asarray(self.attrs, dtype=np.float64).reshape(n, -1)
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64).reshape(-1)
            if self.point_labels.shape[0] != n:
                raise ShapeError(f"{self.point_labels.shape[0]} point labels for {n} points")
        if self.cloud_label is not None:
            self.cloud_label = int(self.cloud_label)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def num_attrs(self) -> int:
        return self.attrs.shape[1]

    def take(self, index) -> PointCloud:
        index = np.asarray(index, dtype=np.intp)
        labels = None if self.point_labels is None else self.point_labels[index]
        return PointCloud(self.coords[index], self.attrs[index], labels, self.cloud_label)


@dataclass
class NeighborGroup:
    centroid_index: int
    member_indices: np.ndarray
    member_offsets: np.ndarray


def _coords(pc) -> np.ndarray:
    return pc.coords if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def pairwise_distances(query: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Euclidean distances, (Q, S). Computed per pair so the value never
    depends on where the pair sits in either array."""
    d = query[:, None, :] - source[None, :, :]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def lex_rank(points: np.ndarray) -> np.ndarray:
    """Rank of each point in (x, y, z, index) order; a total order for tie-breaks."""
    order = np.lexsort((np.arange(len(points)), points[:, 2], points[:, 1], points[:, 0]))
    rank = np.empty(len(points), dtype=np.intp)
    rank[order] = np.arange(len(points))
    return rank


def farthest_point_sample(pc, m: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Greedy farthest point sampling; returns ``m`` indices in pick order.

    The seed is the lexicographically smallest point unless ``rng`` is given,
    in which case a uniformly random start is drawn from it.
    """
    pts = _coords(pc)
    n = len(pts)
    if not 1 <= m <= n:
        raise ContractError(f"cannot sample {m} of {n} points")
    rank = lex_rank(pts)
    first = int(rng.integers(n)) if rng is not None else int(np.argmin(rank))
    picked = np.empty(m, dtype=np.intp)
    picked[0] = first
    chosen = np.zeros(n, dtype=bool)
    chosen[first] = True
    mind = pairwise_distances(pts[first : first + 1], pts)[0]
    for i in range(1, m):
        cand = np.where(chosen, -np.inf, mind)
        best = cand.max()
        ties = np.flatnonzero(cand == best)
        nxt = int(ties[np.argmin(rank[ties])]) if len(ties) > 1 else int(ties[0])
        picked[i] = nxt
        chosen[nxt] = True
        np.minimum(mind, pairwise_distances(pts[nxt : nxt + 1], pts)[0], out=mind)
    return picked


def canonical_neighbors(query, source) -> tuple[np.ndarray, np.ndarray]:
    """Every source point ordered canonically for every query point.

    Returns (Q, S) index and distance arrays; row ``q`` lists all sources by
    (distance to ``q``, lexicographic coordinates, index).
    """
    q = _coords(query)
    s = _coords(source)
    dist = pairwise_distances(q, s)
    rank = np.broadcast_to(lex_rank(s), dist.shape)
    order = np.lexsort((rank, dist), axis=1)
    return order, np.take_along_axis(dist, order, axis=1)


def select_ball(order: np.ndarray, sorted_dist: np.ndarray, r: float, k: int) -> np.ndarray:
    """Ball-query members from a canonical ordering; pads with the nearest member."""
    if r <= 0:
        raise ContractError(f"ball radius must be positive, got {r}")
    if k < 1:
        raise ContractError(f"neighbour count must be >= 1, got {k}")
    kk = min(k, order.shape[1])
    members = order[:, :kk]
    inside = sorted_dist[:, :kk] <= r
    inside[:, 0] = True
    out = np.where(inside, members, members[:, :1])
    if kk < k:
        out = np.concatenate([out, np.repeat(out[:, :1], k - kk, axis=1)], axis=1)
    return out


def ball_query_indices(pc, centroid_indices, r: float, k: int) -> np.ndarray:
    """(M, k) member indices, canonically sorted and padded with the nearest member."""
    pts = _coords(pc)
    centroid_indices = np.asarray(centroid_indices, dtype=np.intp).reshape(-1)
    order, sd = canonical_neighbors(pts[centroid_indices], pts)
    return select_ball(order, sd, r, k)


def ball_query(pc, centroid_indices, r: float, k: int) -> list[NeighborGroup]:
    pts = _coords(pc)
    centroid_indices = np.asarray(centroid_indices, dtype=np.intp).reshape(-1)
    idx = ball_query_indices(pts, centroid_indices, r, k)
    return [
        NeighborGroup(int(c), members, pts[members] - pts[c])
        for c, members in zip(centroid_indices, idx)
    ]


def knn(query, source, k: int) -> tuple[np.ndarray, np.ndarray]:
    """``k`` nearest sources per query: (Q, k) indices and distances."""
    s = _coords(source)
    if not 1 <= k <= len(s):
        raise ContractError(f"k={k} outside [1, {len(s)}]")
    q = _coords(query)
    if k == len(s):
        order, sd = canonical_neighbors(q, s)
        return order, sd
    dist = pairwise_distances(q, s)
    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    d_part = np.take_along_axis(dist, part, axis=1)
    cut = d_part.max(axis=1, keepdims=True)
    rank = lex_rank(s)
    ambiguous = (dist <= cut).sum(axis=1) > k
    order = np.lexsort((rank[part], d_part), axis=1)
    idx = np.take_along_axis(part, order, axis=1)
    for row in np.flatnonzero(ambiguous):
        # ties straddle the k-th distance: settle membership canonically
        cands = np.flatnonzero(dist[row] <= cut[row, 0])
        idx[row] = cands[np.lexsort((rank[cands], dist[row, cands]))][:k]
    return idx, np.take_along_axis(dist, idx, axis=1)


def interpolation_weights(source_pts, query_pts, k: int = 3, eps: float = INTERP_EPS):
    """Neighbour indices and normalised inverse-distance weights, each (Q, k)."""
    idx, dist = knn(query_pts, source_pts, k)
    inv = 1.0 / (dist + eps)
    return idx, inv / inv.sum(axis=1, keepdims=True)


def interpolation_matrix(source_pts, query_pts, k: int = 3, eps: float = INTERP_EPS) -> np.ndarray:
    """Dense (Q, S) matrix whose product with source features interpolates them."""
    s = _coords(source_pts)
    idx, w = interpolation_weights(s, query_pts, k, eps)
    mat = np.zeros((idx.shape[0], len(s)))
    # knn indices are distinct within a row, so plain assignment is exact
    np.put_along_axis(mat, idx, w, axis=1)
    return mat


def interpolate_knn(source_feats: Tensor, source_pts, query_pts, k: int = 3) -> Tensor:
    """Inverse-distance interpolation of (S, D) features onto the query points.

    Differentiable in ``source_feats``; the geometry is a constant.
    """
    s = _coords(source_pts)
    if source_feats.shape[0] != len(s):
        raise ShapeError(f"{source_feats.shape[0]} feature rows for {len(s)} source points")
    return matmul(Tensor(interpolation_matrix(s, query_pts, k)), source_feats)
