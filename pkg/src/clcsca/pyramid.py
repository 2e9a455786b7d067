"""Point-wise feature pyramid: three grouped shared-MLP paths at decreasing resolution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import geometry
from .errors import ContractError, ShapeError
from .tensor import Tensor, concat_cols, gather_rows, group_max, init_linear, linear, relu


@dataclass(frozen=True)
class LayerSpec:
    radius: float
    k: int
    mlp: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mlp", tuple(int(c) for c in self.mlp))
        if self.radius <= 0 or self.k < 1 or len(self.mlp) < 2:
            raise ContractError(f"invalid layer spec {self}")


@dataclass(frozen=True)
class PathConfig:
    resolution: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) != 3:
            raise ContractError(f"a path needs exactly 3 layers, got {len(layers)}")
        radii = [l.radius for l in layers]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ContractError(f"radii must increase within a path, got {radii}")
        width = layers[0].mlp[-1]
        for l in layers[1:]:
            if l.mlp[0] != 2 * width:
                raise ContractError(
                    f"deeper layer input {l.mlp[0]} must be twice the previous width {width}"
                )
            width = l.mlp[-1]
        if len({l.mlp[-1] for l in layers}) != 1:
            raise ContractError("all three levels must share one output width")

    @property
    def out_channels(self) -> int:
        return self.layers[-1].mlp[-1]

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "layers": [{"radius": l.radius, "k": l.k, "mlp": list(l.mlp)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> PathConfig:
        return cls(int(d["resolution"]), tuple(LayerSpec(**l) for l in d["layers"]))


def validate_paths(paths: Sequence[PathConfig]) -> None:
    if len(paths) != 3:
        raise ContractError(f"the pyramid has 3 paths, got {len(paths)}")
    res = [p.resolution for p in paths]
    if any(b > a for a, b in zip(res, res[1:])):
        raise ContractError(f"path resolutions must not increase, got {res}")


@dataclass
class LevelFeatures:
    low: Tensor
    mid: Tensor
    high: Tensor
    points: np.ndarray
    indices: np.ndarray = field(repr=False)

    def as_list(self) -> list[Tensor]:
        return [self.low, self.mid, self.high]


def shared_mlp(x: Tensor, weights: Sequence[tuple[Tensor, Tensor | None]]) -> Tensor:
    """Per-row linear + relu stack."""
    for W, b in weights:
        x = relu(linear(x, W, b))
    return x


def mlp_weights(params: Mapping[str, Tensor], prefix: str, depth: int):
    return [(params[f"{prefix}.mlp{j}.W"], params.get(f"{prefix}.mlp{j}.b")) for j in range(depth)]


def group_and_pool_first(
    path_pts: np.ndarray,
    r: float,
    k: int,
    weights,
    attrs: np.ndarray | None = None,
    neighbors: np.ndarray | None = None,
) -> Tensor:
    """Layer 1: relative offsets (plus neighbour attributes) -> shared MLP -> max over K."""
    path_pts = np.asarray(path_pts, dtype=np.float64)
    n = len(path_pts)
    if neighbors is None:
        neighbors = geometry.ball_query_indices(path_pts, np.arange(n), r, k)
    offsets = path_pts[neighbors] - path_pts[:, None, :]
    x = offsets.reshape(n * k, 3)
    if attrs is not None and attrs.shape[1]:
        x = np.concatenate([x, attrs[neighbors.reshape(-1)]], axis=1)
    if x.shape[1] != weights[0][0].shape[0]:
        raise ShapeError(f"layer-1 input width {x.shape[1]} vs weight {weights[0][0].shape}")
    return group_max(shared_mlp(Tensor(x), weights), k)


def group_and_pool_deeper(
    path_pts: np.ndarray,
    feats: Tensor,
    r: float,
    k: int,
    weights,
    neighbors: np.ndarray | None = None,
) -> Tensor:
    """Layers 2-3: concat(neighbour feature, centroid feature) -> shared MLP -> max over K."""
    n = len(path_pts)
    if feats.shape[0] != n:
        raise ShapeError(f"{feats.shape[0]} feature rows for {n} path points")
    if 2 * feats.shape[1] != weights[0][0].shape[0]:
        raise ShapeError(
            f"grouped input width {2 * feats.shape[1]} vs weight {weights[0][0].shape}"
        )
    if neighbors is None:
        neighbors = geometry.ball_query_indices(path_pts, np.arange(n), r, k)
    grouped = concat_cols(
        gather_rows(feats, neighbors.reshape(-1)),
        gather_rows(feats, np.repeat(np.arange(n), k)),
    )
    return group_max(shared_mlp(grouped, weights), k)


@dataclass
class PathPlan:
    """Parameter-free geometry of one path: sampled points and per-layer neighbours."""

    indices: np.ndarray
    points: np.ndarray
    neighbors: list[np.ndarray]


def plan_path(
    pc: geometry.PointCloud,
    cfg: PathConfig,
    fps_rng: np.random.Generator | None = None,
    fps_order: np.ndarray | None = None,
) -> PathPlan:
    """Sample ``cfg.resolution`` points and run every layer's ball query.

    ``fps_order`` may carry a longer FPS pick sequence of the same cloud; greedy
    FPS from a fixed start is prefix-consistent, so its head is reused.
    """
    if len(pc) < cfg.resolution:
        raise ContractError(f"path needs {cfg.resolution} points, cloud has {len(pc)}")
    if fps_order is not None and len(fps_order) >= cfg.resolution:
        idx = np.asarray(fps_order[: cfg.resolution])
    else:
        idx = geometry.farthest_point_sample(pc, cfg.resolution, rng=fps_rng)
    pts = pc.coords[idx]
    # one canonical sort serves every layer's ball query
    order, sd = geometry.canonical_neighbors(pts, pts)
    return PathPlan(idx, pts, [geometry.select_ball(order, sd, l.radius, l.k) for l in cfg.layers])


def plan_pyramid(
    pc: geometry.PointCloud,
    cfgs: Sequence[PathConfig],
    fps_rng: np.random.Generator | None = None,
) -> list[PathPlan]:
    validate_paths(cfgs)
    if len(pc) < cfgs[0].resolution:
        raise ContractError(f"cloud has {len(pc)} points, first path needs {cfgs[0].resolution}")
    order = geometry.farthest_point_sample(pc, max(c.resolution for c in cfgs), rng=fps_rng)
    return [plan_path(pc, cfg, fps_order=order) for cfg in cfgs]


def run_path(
    pc: geometry.PointCloud,
    cfg: PathConfig,
    params: Mapping[str, Tensor],
    prefix: str = "path0",
    fps_rng: np.random.Generator | None = None,
    fps_order: np.ndarray | None = None,
    plan: PathPlan | None = None,
) -> LevelFeatures:
    """Low/mid/high level features of one path, all at ``cfg.resolution`` points."""
    plan = plan or plan_path(pc, cfg, fps_rng, fps_order)
    pts = plan.points
    feats = None
    outs = []
    for j, (layer, nb) in enumerate(zip(cfg.layers, plan.neighbors)):
        w = mlp_weights(params, f"{prefix}.layer{j}", len(layer.mlp) - 1)
        if j == 0:
            feats = group_and_pool_first(pts, layer.radius, layer.k, w, pc.attrs[plan.indices], nb)
        else:
            feats = group_and_pool_deeper(pts, feats, layer.radius, layer.k, w, nb)
        outs.append(feats)
    return LevelFeatures(outs[0], outs[1], outs[2], pts, plan.indices)


def build_pyramid(
    pc: geometry.PointCloud,
    cfgs: Sequence[PathConfig],
    params: Mapping[str, Tensor],
    fps_rng: np.random.Generator | None = None,
    plans: Sequence[PathPlan] | None = None,
) -> list[LevelFeatures]:
    plans = plans or plan_pyramid(pc, cfgs, fps_rng)
    return [run_path(pc, cfg, params, f"path{i}", plan=pl) for i, (cfg, pl) in enumerate(zip(cfgs, plans))]


def init_path_params(cfg: PathConfig, prefix: str, rng: np.random.Generator, num_attrs: int = 0):
    out: dict[str, Tensor] = {}
    for j, layer in enumerate(cfg.layers):
        chain = list(layer.mlp)
        if j == 0:
            chain[0] += num_attrs
        for m, (cin, cout) in enumerate(zip(chain, chain[1:])):
            out.update(init_linear(f"{prefix}.layer{j}.mlp{m}", cin, cout, rng))
    return out
