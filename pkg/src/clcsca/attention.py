"""Self-attention, three-way cross-attention, and the CLCA/CSCA blocks built on them.

A block's projections live in :class:`AttentionParams`. For self-attention the
three matrices are the query/key/value maps; for cross-attention they are the
maps applied to the first, second and third operand respectively. Queries
always come from the first operand, keys from the second, values from the third.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import geometry
from .errors import ContractError, ShapeError
from .pyramid import LevelFeatures, shared_mlp
from .tensor import Tensor, add_n, concat_cols, linear, matmul, scale, softmax_rows, transpose

_captured: list | None = None


@contextlib.contextmanager
def capture_attention():
    """Collect a read-only copy of every attention matrix computed in the block."""
    global _captured
    previous = _captured
    _captured = []
    try:
        yield _captured
    finally:
        _captured = previous


def _emit(weights: Tensor) -> None:
    if _captured is not None:
        snap = weights.data.copy()
        snap.flags.writeable = False
        _captured.append(snap)


@dataclass
class AttentionParams:
    """Projections (C, C/4), (C, C/4), (C, C)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        c, c_red = self.wq.shape
        if c % 4:
            raise ContractError(f"channel width {c} is not divisible by 4")
        if self.wk.shape != (c, c_red) or self.wv.shape != (c, c):
            raise ShapeError(
                f"attention projections disagree: {self.wq.shape}, {self.wk.shape}, {self.wv.shape}"
            )
        for w in (self.wq, self.wk, self.wv):
            if not np.all(np.isfinite(w.data)):
                raise ContractError("attention weights must be finite")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, zero_value: bool = False) -> AttentionParams:
        if c % 4:
            raise ContractError(f"channel width {c} is not divisible by 4")
        bound = 1.0 / math.sqrt(c)
        wq = rng.uniform(-bound, bound, (c, c // 4))
        wk = rng.uniform(-bound, bound, (c, c // 4))
        wv = np.zeros((c, c)) if zero_value else rng.uniform(-bound, bound, (c, c))
        return cls(*(Tensor(w, requires_grad=True) for w in (wq, wk, wv)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.Wq": self.wq, f"{prefix}.Wk": self.wk, f"{prefix}.Wv": self.wv}

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> AttentionParams:
        return cls(params[f"{prefix}.Wq"], params[f"{prefix}.Wk"], params[f"{prefix}.Wv"])


def _attend(q: Tensor, k: Tensor, v: Tensor, scaled: bool) -> Tensor:
    scores = matmul(q, transpose(k))
    if scaled:
        scores = scale(scores, 1.0 / math.sqrt(q.shape[1]))
    weights = softmax_rows(scores)
    _emit(weights)
    return matmul(weights, v)


def _check_input(f: Tensor, p: AttentionParams) -> None:
    if f.data.ndim != 2 or f.shape[1] != p.channels:
        raise ShapeError(f"attention input {f.shape} does not match {p.channels} channels")


def self_attention(f: Tensor, p: AttentionParams) -> Tensor:
    """``softmax(F Wq (F Wk)^T / sqrt(C')) F Wv + F``."""
    _check_input(f, p)
    out = _attend(linear(f, p.wq), linear(f, p.wk), linear(f, p.wv), scaled=True)
    return out + f


def cross_attention_trio(a: Tensor, b: Tensor, g: Tensor, p: AttentionParams, scaled: bool = True) -> Tensor:
    """``softmax((A W1)(B W2)^T [/ sqrt(C')]) (G W3)``; no residual."""
    for x in (a, b, g):
        _check_input(x, p)
    if not a.shape == b.shape == g.shape:
        raise ShapeError(f"cross-attention operands disagree: {a.shape}, {b.shape}, {g.shape}")
    return _attend(linear(a, p.wq), linear(b, p.wk), linear(g, p.wv), scaled)


@dataclass
class FusionParams:
    """Three per-branch self-attentions followed by one cross-attention.

    ``branch`` holds either three independent blocks or the same block three
    times (weights shared across branches).
    """

    branch: tuple[AttentionParams, AttentionParams, AttentionParams]
    cross: AttentionParams


def _fuse(xs: Sequence[Tensor], p: FusionParams, scaled_cross: bool) -> Tensor:
    if len(xs) != 3:
        raise ContractError(f"fusion takes three branches, got {len(xs)}")
    if len({x.shape for x in xs}) != 1:
        raise ShapeError(f"branch shapes disagree: {[x.shape for x in xs]}")
    sc = [self_attention(x, bp) for x, bp in zip(xs, p.branch)]
    return add_n([cross_attention_trio(sc[0], sc[1], sc[2], p.cross, scaled_cross)] + sc)


def clca(levels: LevelFeatures | Sequence[Tensor], p: FusionParams, scaled_cross: bool = True) -> Tensor:
    """Cross-level cross-attention over (low, mid, high) features of one path."""
    xs = levels.as_list() if isinstance(levels, LevelFeatures) else list(levels)
    return _fuse(xs, p, scaled_cross)


def csca(s1: Tensor, s2: Tensor, s3: Tensor, p: FusionParams, scaled_cross: bool = True) -> Tensor:
    """Cross-scale cross-attention over the three aligned, upsampled scales."""
    return _fuse([s1, s2, s3], p, scaled_cross)


def upsample(
    f: Tensor,
    path_pts: np.ndarray,
    full_pts: np.ndarray,
    weights,
    k: int = 3,
    with_coords: bool = False,
    matrix: np.ndarray | None = None,
) -> Tensor:
    """Interpolate path features to every point of the full cloud, then a shared MLP.

    With ``with_coords`` the full-cloud coordinates are appended before the MLP.
    ``matrix`` is a precomputed :func:`geometry.interpolation_matrix` for these points.
    """
    if matrix is None:
        x = geometry.interpolate_knn(f, path_pts, full_pts, k=min(k, len(path_pts)))
    else:
        x = matmul(Tensor(matrix), f)
    if with_coords:
        x = concat_cols(x, Tensor(np.asarray(full_pts, dtype=np.float64)))
    return shared_mlp(x, weights)
