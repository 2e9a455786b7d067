"""Farthest point sampling, ball query and kNN interpolation on a small cloud."""

import numpy as np

from clcsca import geometry as G
from clcsca.tensor import Tensor

rng = np.random.default_rng(3)
pts = rng.uniform(-1, 1, size=(32, 3))

order = G.farthest_point_sample(pts, 8)
print("FPS picks (starts at the lexicographically smallest point):", order.tolist())
print("the first 4 of an 8-point sample are a 4-point sample:", G.farthest_point_sample(pts, 4).tolist())

groups = G.ball_query(pts, order[:3], r=0.6, k=6)
for g in groups:
    print(f"centroid {g.centroid_index:2d}: neighbours {g.member_indices.tolist()}  (padded with the nearest member)")

# features living on the 8 sampled points, spread back to all 32
feats = Tensor(np.eye(8))
dense = G.interpolate_knn(feats, pts[order], pts, k=3)
print("interpolated rows sum to 1:", np.allclose(dense.data.sum(axis=1), 1.0))

# shuffling the input reorders nothing but indices
perm = rng.permutation(32)
same = np.array_equal(pts[order], pts[perm][G.farthest_point_sample(pts[perm], 8)])
print("sampled coordinates unchanged by a permutation:", same)
