import numpy as np
import pytest

import oracles
from conftest import random_cloud
from clcsca.errors import ContractError, ShapeError
from clcsca.geometry import PointCloud
from clcsca.pyramid import (
    LayerSpec,
    PathConfig,
    build_pyramid,
    group_and_pool_deeper,
    group_and_pool_first,
    init_path_params,
    mlp_weights,
    run_path,
    validate_paths,
)
from clcsca.tensor import Tensor, finite_diff_check


def small_path(resolution=8, width=8):
    return PathConfig(
        resolution,
        (
            LayerSpec(0.4, 4, (3, 8, width)),
            LayerSpec(0.8, 4, (2 * width, width)),
            LayerSpec(1.6, 6, (2 * width, width)),
        ),
    )


def numpy_weights(params, prefix, cfg):
    out = []
    for j, layer in enumerate(cfg.layers):
        ws = mlp_weights(params, f"{prefix}.layer{j}", len(layer.mlp) - 1)
        out.append([(W.data, b.data) for W, b in ws])
    return out


@pytest.mark.parametrize("seed,grid,attrs", [(s, s % 3 == 0, s % 2) for s in range(10)])
def test_run_path_matches_loop_oracle(seed, grid, attrs):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 33))
    pts = random_cloud(rng, n, grid)
    a = rng.normal(size=(n, 2)) if attrs else None
    pc = PointCloud(pts, a)
    cfg = small_path(resolution=int(rng.integers(4, n + 1)))
    params = init_path_params(cfg, "path0", rng, num_attrs=pc.num_attrs)
    lv = run_path(pc, cfg, params)
    idx, want = oracles.path_levels(pts, a, cfg.resolution, [(l.radius, l.k) for l in cfg.layers], numpy_weights(params, "path0", cfg))
    assert lv.indices.tolist() == idx
    for got, w in zip(lv.as_list(), want):
        np.testing.assert_allclose(got.numpy(), w, rtol=0, atol=1e-12)


def test_first_layer_worksheet():
    # two points 0.5 apart, identity-like weights: max over offsets per axis
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0]])
    W = Tensor(np.vstack([np.eye(3), -np.eye(3)]).T.copy())
    out = group_and_pool_first(pts, 1.0, 2, [(W, Tensor(np.zeros((1, 6))))])
    # point 0 sees offsets {0, +0.5x}, point 1 sees {0, -0.5x}
    np.testing.assert_array_equal(out.numpy(), [[0.5, 0, 0, 0, 0, 0], [0, 0, 0, 0.5, 0, 0]])


def test_deeper_layer_concatenates_neighbour_then_centroid():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0]])
    feats = Tensor(np.array([[1.0], [3.0]]))
    # weight picks neighbour minus centroid, relu keeps the positive part
    W = Tensor(np.array([[1.0], [-1.0]]))
    out = group_and_pool_deeper(pts, feats, 1.0, 2, [(W, None)])
    np.testing.assert_array_equal(out.numpy(), [[2.0], [0.0]])


def test_pyramid_shares_fps_prefix_across_paths():
    rng = np.random.default_rng(3)
    pc = PointCloud(random_cloud(rng, 40))
    cfgs = [small_path(16), small_path(8), small_path(4)]
    params = {}
    for i, c in enumerate(cfgs):
        params.update(init_path_params(c, f"path{i}", rng))
    levels = build_pyramid(pc, cfgs, params)
    assert levels[1].indices.tolist() == levels[0].indices[:8].tolist()
    assert levels[2].indices.tolist() == levels[0].indices[:4].tolist()
    assert [lv.high.shape for lv in levels] == [(16, 8), (8, 8), (4, 8)]


def test_pyramid_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    pc = PointCloud(random_cloud(rng, 12))
    cfg = small_path(6, width=4)
    params = init_path_params(cfg, "path0", rng)
    names = sorted(params)

    def f(*ws):
        lv = run_path(pc, cfg, dict(zip(names, ws)))
        return lv.low + lv.mid + lv.high

    rep = finite_diff_check(f, [params[n] for n in names])
    assert rep.passed, rep.max_rel_err


def test_path_config_validation():
    with pytest.raises(ContractError):
        PathConfig(8, (LayerSpec(0.4, 4, (3, 8)), LayerSpec(0.4, 4, (16, 8)), LayerSpec(0.8, 4, (16, 8))))
    with pytest.raises(ContractError):
        PathConfig(8, (LayerSpec(0.2, 4, (3, 8)), LayerSpec(0.4, 4, (8, 8)), LayerSpec(0.8, 4, (16, 8))))
    with pytest.raises(ContractError):
        PathConfig(8, (LayerSpec(0.2, 4, (3, 8)), LayerSpec(0.4, 4, (16, 4)), LayerSpec(0.8, 4, (8, 8))))
    with pytest.raises(ContractError):
        LayerSpec(-0.1, 4, (3, 8))
    with pytest.raises(ContractError):
        validate_paths([small_path(4), small_path(8), small_path(2)])
    cfg = small_path()
    assert PathConfig.from_dict(cfg.to_dict()) == cfg


def test_run_path_rejects_small_cloud_and_wrong_width():
    rng = np.random.default_rng(5)
    cfg = small_path(8)
    params = init_path_params(cfg, "path0", rng)
    with pytest.raises(ContractError):
        run_path(PointCloud(random_cloud(rng, 5)), cfg, params)
    with pytest.raises(ShapeError):
        run_path(PointCloud(random_cloud(rng, 10), rng.normal(size=(10, 1))), cfg, params)
