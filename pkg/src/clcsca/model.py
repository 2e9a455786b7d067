"""Classification and segmentation networks, their configs, loss and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import attention as att
from .errors import ContractError, ShapeError
from .geometry import PointCloud
from .geometry import interpolation_matrix
from .pyramid import LayerSpec, PathConfig, PathPlan, build_pyramid, init_path_params, mlp_weights, plan_pyramid, validate_paths
from .tensor import (
    Tensor,
    add_n,
    concat_cols,
    init_linear,
    linear,
    load_tensors,
    log_softmax_nll,
    max_over_rows,
    mean_over_rows,
    mul,
    relu,
    save_tensors,
    standardize_rows,
)

CONFIG_VERSION = 1
TASKS = ("classification", "segmentation")

ModelParams = dict  # name -> Tensor, insertion-ordered


@dataclass(frozen=True)
class NetworkConfig:
    """Whole-network description. ``head`` lists every FC width, input first."""

    task: str
    num_classes: int
    input_points: int
    paths: tuple[PathConfig, PathConfig, PathConfig]
    clca_out_channels: int
    csca_channels: int
    upsample_mlp: tuple[int, ...]
    head: tuple[int, ...]
    dropout: float = 0.4
    upsample_with_coords: bool = False
    num_attrs: int = 0
    use_clca: bool = True
    use_csca: bool = True
    # cross-attention scores divided by sqrt(C') like the self-attention ones
    scale_cross_attention: bool = True
    # one self-attention block shared by the three scales before cross-scale fusion
    share_scale_attention: bool = True
    zero_init_values: bool = False
    fps_random_start: bool = False
    loss_reduction: str = "mean"
    interp_k: int = 3
    # standardise every level's features over the cloud's points before fusion
    standardize_levels: bool = False

    def __post_init__(self):
        paths = tuple(p if isinstance(p, PathConfig) else PathConfig.from_dict(p) for p in self.paths)
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "upsample_mlp", tuple(int(c) for c in self.upsample_mlp))
        object.__setattr__(self, "head", tuple(int(c) for c in self.head))
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        validate_paths(paths)
        if paths[0].resolution > self.input_points:
            raise ContractError(
                f"first path resolution {paths[0].resolution} exceeds input size {self.input_points}"
            )
        if self.csca_channels % 4 or self.clca_out_channels % 4:
            raise ContractError("attention widths must be divisible by 4")
        expect_up = self.clca_out_channels + (3 if self.upsample_with_coords else 0)
        if self.upsample_mlp[0] != expect_up or self.upsample_mlp[-1] != self.csca_channels:
            raise ContractError(
                f"upsample MLP {self.upsample_mlp} must map {expect_up} -> {self.csca_channels}"
            )
        pooled = 2 * self.csca_channels if self.task == "classification" else self.csca_channels
        if self.head[0] != pooled:
            raise ContractError(f"head input {self.head[0]} must equal {pooled}")
        if self.head[-1] != self.num_classes:
            raise ContractError(f"head must end at {self.num_classes} classes, got {self.head[-1]}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout {self.dropout} outside [0, 1)")
        if self.loss_reduction not in ("mean", "sum"):
            raise ContractError(f"unknown loss reduction {self.loss_reduction!r}")

    def replace(self, **changes) -> NetworkConfig:
        return replace(self, **changes)

    def ablate(self, variant: str) -> NetworkConfig:
        """``baseline`` | ``clca`` | ``csca`` | ``full``."""
        flags = {
            "baseline": (False, False),
            "clca": (True, False),
            "csca": (False, True),
            "full": (True, True),
        }
        if variant not in flags:
            raise ContractError(f"unknown ablation variant {variant!r}")
        use_clca, use_csca = flags[variant]
        return replace(self, use_clca=use_clca, use_csca=use_csca)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paths"] = [p.to_dict() for p in self.paths]
        d["upsample_mlp"] = list(self.upsample_mlp)
        d["head"] = list(self.head)
        return {"version": CONFIG_VERSION, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> NetworkConfig:
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ContractError(f"unsupported network config version {version}")
        d["paths"] = tuple(PathConfig.from_dict(p) for p in d["paths"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> NetworkConfig:
        return cls.from_dict(json.loads(text))


def _paths(resolutions, radii, ks, first_mlp, width, density_scaled=False):
    """Three paths with the same layer stack.

    With ``density_scaled`` each path's radii grow by sqrt(N_1 / N_i), keeping
    the expected neighbour count per ball roughly equal on a surface. Small
    clouds need this: a fixed radius finds no neighbours once the sampled
    points are sparser than it.
    """
    out = []
    for res in resolutions:
        f = math.sqrt(resolutions[0] / res) if density_scaled else 1.0
        out.append(
            PathConfig(
                res,
                (
                    LayerSpec(round(radii[0] * f, 6), ks[0], first_mlp),
                    LayerSpec(round(radii[1] * f, 6), ks[1], (2 * width, width, width)),
                    LayerSpec(round(radii[2] * f, 6), ks[2], (2 * width, width, width)),
                ),
            )
        )
    return tuple(out)


def fullsize_classification(num_classes: int = 40) -> NetworkConfig:
    """Full-size classification network (1024 input points)."""
    return NetworkConfig(
        task="classification",
        num_classes=num_classes,
        input_points=1024,
        paths=_paths((512, 256, 128), (0.2, 0.4, 0.8), (16, 32, 64), (3, 64, 128, 128), 128),
        clca_out_channels=256,
        csca_channels=512,
        upsample_mlp=(256, 512),
        head=(1024, 512, 256, num_classes),
    )


def fullsize_segmentation(num_classes: int = 50) -> NetworkConfig:
    """Full-size part segmentation network (2048 input points)."""
    return NetworkConfig(
        task="segmentation",
        num_classes=num_classes,
        input_points=2048,
        paths=_paths((512, 256, 128), (0.1, 0.2, 0.4), (16, 32, 64), (3, 64, 128, 128), 128),
        clca_out_channels=256,
        csca_channels=128,
        upsample_mlp=(259, 512, 256, 128),
        upsample_with_coords=True,
        head=(128, 128, num_classes),
    )


def desk_classification(num_classes: int = 4) -> NetworkConfig:
    """Narrow classification network for 256-point synthetic clouds."""
    return NetworkConfig(
        task="classification",
        num_classes=num_classes,
        input_points=256,
        paths=_paths((64, 32, 16), (0.5, 1.0, 2.0), (8, 16, 16), (3, 16, 32), 32, True),
        clca_out_channels=32,
        csca_channels=32,
        upsample_mlp=(32, 32),
        head=(64, 32, 16, num_classes),
        # without normalisation layers the pooled features carry a large
        # common-mode offset; dropout on a 16-wide layer turns it into noise
        dropout=0.0,
    )


def desk_segmentation(num_classes: int = 7) -> NetworkConfig:
    """Narrow segmentation network for 512-point synthetic part shapes."""
    return NetworkConfig(
        task="segmentation",
        num_classes=num_classes,
        input_points=512,
        paths=_paths((128, 64, 32), (0.4, 0.8, 1.6), (8, 16, 16), (3, 16, 32), 32, True),
        clca_out_channels=32,
        csca_channels=32,
        upsample_mlp=(35, 32),
        upsample_with_coords=True,
        head=(32, 32, num_classes),
        dropout=0.0,
        # small parts (a mug handle) differ from their surroundings by a sliver
        # of each feature's range; centring per cloud makes that difference visible
        standardize_levels=True,
    )


def miniature(task: str = "classification", num_classes: int = 3) -> NetworkConfig:
    """64-point, 8-channel network for end-to-end gradient checks."""
    seg = task == "segmentation"
    return NetworkConfig(
        task=task,
        num_classes=num_classes,
        input_points=64,
        paths=_paths((16, 8, 4), (0.6, 1.2, 2.4), (4, 4, 4), (3, 8), 8, True),
        clca_out_channels=8,
        csca_channels=8,
        upsample_mlp=(11, 8) if seg else (8, 8),
        upsample_with_coords=seg,
        head=(8, 8, num_classes) if seg else (16, 8, num_classes),
        dropout=0.0,
        standardize_levels=seg,
    )


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: NetworkConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Fresh parameters with stable hierarchical names."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params: ModelParams = {}
    zero_v = cfg.zero_init_values
    for i, path in enumerate(cfg.paths):
        pre = f"path{i}"
        params.update(init_path_params(path, pre, rng, cfg.num_attrs))
        params.update(init_linear(f"{pre}.lift", path.out_channels, cfg.clca_out_channels, rng, relu_gain=False))
        if cfg.use_clca:
            for lvl in ("low", "mid", "high"):
                params.update(att.AttentionParams.init(cfg.clca_out_channels, rng, zero_v).named(f"{pre}.clca.{lvl}"))
            params.update(att.AttentionParams.init(cfg.clca_out_channels, rng, zero_v).named(f"{pre}.clca.cross"))
        chain = cfg.upsample_mlp
        for m, (cin, cout) in enumerate(zip(chain, chain[1:])):
            params.update(init_linear(f"{pre}.up.mlp{m}", cin, cout, rng))
    if cfg.use_csca:
        d = cfg.csca_channels
        if cfg.share_scale_attention:
            params.update(att.AttentionParams.init(d, rng, zero_v).named("csca.scale"))
        else:
            for i in range(3):
                params.update(att.AttentionParams.init(d, rng, zero_v).named(f"csca.scale{i}"))
        params.update(att.AttentionParams.init(d, rng, zero_v).named("csca.cross"))
    depth = len(cfg.head) - 1
    for m, (cin, cout) in enumerate(zip(cfg.head, cfg.head[1:])):
        params.update(init_linear(f"head.fc{m}", cin, cout, rng, relu_gain=m < depth - 1))
    return params


def _fusion(params: Mapping[str, Tensor], prefix: str, branch_names: Sequence[str]) -> att.FusionParams:
    branch = tuple(att.AttentionParams.from_params(params, f"{prefix}.{n}") for n in branch_names)
    return att.FusionParams(branch, att.AttentionParams.from_params(params, f"{prefix}.cross"))


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


@dataclass
class CloudPlan:
    """Everything about a forward pass that depends only on the cloud's geometry.

    Reusing a plan skips sampling, neighbour search and interpolation weights,
    which matters when one cloud is evaluated many times (test sets scored
    every epoch, finite-difference checks).
    """

    paths: list[PathPlan]
    interp: list[np.ndarray]


def plan_cloud(pc: PointCloud, cfg: NetworkConfig, fps_rng: np.random.Generator | None = None) -> CloudPlan:
    if len(pc) < cfg.paths[0].resolution:
        raise ContractError(f"cloud has {len(pc)} points, network needs at least {cfg.paths[0].resolution}")
    paths = plan_pyramid(pc, cfg.paths, fps_rng if cfg.fps_random_start else None)
    interp = [
        interpolation_matrix(pl.points, pc.coords, min(cfg.interp_k, len(pl.points)))
        for pl in paths
    ]
    return CloudPlan(paths, interp)


def point_features(
    pc: PointCloud,
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    fps_rng: np.random.Generator | None = None,
    plan: CloudPlan | None = None,
) -> Tensor:
    """Pyramid -> per-path level fusion -> upsampling -> scale fusion; (N, D)."""
    if pc.num_attrs != cfg.num_attrs:
        raise ShapeError(f"cloud carries {pc.num_attrs} attributes, network expects {cfg.num_attrs}")
    plan = plan or plan_cloud(pc, cfg, fps_rng)
    pyramid = build_pyramid(pc, cfg.paths, params, plans=plan.paths)
    scales = []
    for i, levels in enumerate(pyramid):
        pre = f"path{i}"
        xs = levels.as_list()
        if cfg.standardize_levels:
            xs = [standardize_rows(x) for x in xs]
        lifted = [linear(x, params[f"{pre}.lift.W"], params[f"{pre}.lift.b"]) for x in xs]
        if cfg.use_clca:
            fused = att.clca(lifted, _fusion(params, f"{pre}.clca", ("low", "mid", "high")), cfg.scale_cross_attention)
        else:
            fused = add_n(lifted)
        up_w = mlp_weights(params, f"{pre}.up", len(cfg.upsample_mlp) - 1)
        scales.append(
            att.upsample(
                fused, levels.points, pc.coords, up_w, cfg.interp_k, cfg.upsample_with_coords, plan.interp[i]
            )
        )
    if cfg.use_csca:
        names = ("scale",) * 3 if cfg.share_scale_attention else ("scale0", "scale1", "scale2")
        return att.csca(*scales, _fusion(params, "csca", names), cfg.scale_cross_attention)
    return add_n(scales)


def _head(x: Tensor, cfg: NetworkConfig, params: Mapping[str, Tensor], rng) -> Tensor:
    depth = len(cfg.head) - 1
    for m in range(depth):
        x = linear(x, params[f"head.fc{m}.W"], params[f"head.fc{m}.b"])
        if m < depth - 1:
            x = _dropout(relu(x), cfg.dropout, rng)
    return x


def classify_forward(
    pc: PointCloud,
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    rng: np.random.Generator | None = None,
    plan: CloudPlan | None = None,
) -> Tensor:
    """Raw class logits, shape (1, num_classes).

    ``rng`` switches on training behaviour (dropout, random FPS start if configured).
    """
    if cfg.task != "classification":
        raise ContractError("classify_forward needs a classification config")
    feats = point_features(pc, cfg, params, rng, plan)
    pooled = concat_cols(max_over_rows(feats), mean_over_rows(feats))
    return _head(pooled, cfg, params, rng)


def segment_forward(
    pc: PointCloud,
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    rng: np.random.Generator | None = None,
    plan: CloudPlan | None = None,
) -> Tensor:
    """Per-point part logits, shape (N, num_classes)."""
    if cfg.task != "segmentation":
        raise ContractError("segment_forward needs a segmentation config")
    return _head(point_features(pc, cfg, params, rng, plan), cfg, params, rng)


def forward(pc, cfg: NetworkConfig, params, rng=None, plan: CloudPlan | None = None) -> Tensor:
    fn = classify_forward if cfg.task == "classification" else segment_forward
    return fn(pc, cfg, params, rng, plan)


def cross_entropy(logits: Tensor, targets, task: str = "classification", reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; segmentation averages (or sums) over points."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if task == "classification":
        if logits.shape[0] != 1 or targets.size != 1:
            raise ShapeError(f"classification loss takes (1, C) logits and one target, got {logits.shape}")
    elif task != "segmentation":
        raise ContractError(f"unknown task {task!r}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ContractError(f"target outside [0, {logits.shape[1]})")
    return log_softmax_nll(logits, targets, reduction)


def predict(logits) -> np.ndarray | int:
    """Arg-max over classes; the smallest index wins ties."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if data.ndim == 1:
        return int(np.argmax(data))
    if data.shape[0] == 1:
        return int(np.argmax(data[0]))
    return np.argmax(data, axis=1)


@dataclass
class Model:
    cfg: NetworkConfig
    params: ModelParams = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: NetworkConfig, rng=0) -> Model:
        return cls(cfg, init_params(cfg, rng))

    def __call__(
        self, pc: PointCloud, rng: np.random.Generator | None = None, plan: CloudPlan | None = None
    ) -> Tensor:
        return forward(pc, self.cfg, self.params, rng, plan)

    def forward_batch(self, clouds: Sequence[PointCloud], rng=None) -> list[Tensor]:
        return [self(pc, rng) for pc in clouds]

    def loss(self, logits: Tensor, pc: PointCloud) -> Tensor:
        target = pc.cloud_label if self.cfg.task == "classification" else pc.point_labels
        if target is None:
            raise ContractError("cloud carries no label for this task")
        return cross_entropy(logits, target, self.cfg.task, self.cfg.loss_reduction)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def save_params(path, params: Mapping[str, Tensor]) -> None:
    save_tensors(path, {name: t.data for name, t in params.items()})


def load_params(path, cfg: NetworkConfig) -> ModelParams:
    """Read a checkpoint and validate every name and shape against ``cfg``."""
    raw = load_tensors(path)
    template = init_params(cfg, 0)
    missing = [n for n in template if n not in raw]
    extra = [n for n in raw if n not in template]
    if missing or extra:
        raise ShapeError(f"checkpoint does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    out: ModelParams = {}
    for name, t in template.items():
        if raw[name].shape != t.shape:
            raise ShapeError(f"parameter {name!r} has shape {raw[name].shape}, config expects {t.shape}")
        out[name] = Tensor(raw[name], requires_grad=True)
    return out
