"""Self-verification suites behind ``clcsca check``.

Each suite returns a list of :class:`CheckResult`. The oracle suite compares the
geometric kernels and metrics against deliberately naive reference versions
kept in this module; they share no code with the implementations they check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as att
from . import geometry, train
from . import model as M
from . import tensor as tt
from .geometry import PointCloud
from .tensor import Tensor

GRAD_TOL = 1e-4
E2E_GRAD_TOL = 1e-3
INVARIANCE_TOL = 1e-9
ATTENTION_TOL = 1e-12
VALUE_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    instances: int
    worst: float
    tol: float
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name}: {self.instances} instances, worst {self.worst:.3g} "
            f"(tol {self.tol:g}), {self.seconds:.1f}s"
        )


def _timed(name: str, tol: float, body: Callable[[], tuple[int, float]]) -> CheckResult:
    t0 = time.perf_counter()
    count, worst = body()
    return CheckResult(name, bool(worst <= tol), count, worst, tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# gradients


def _rand(rng, shape):
    # stay clear of relu's kink and of max ties
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


def _attn(ws):
    return att.AttentionParams(*ws)


def _fusion(ws):
    return att.FusionParams((_attn(ws[0:3]), _attn(ws[3:6]), _attn(ws[6:9])), _attn(ws[9:12]))


_W8 = [(8, 2), (8, 2), (8, 8)]

GRAD_CASES: dict[str, tuple[Callable[..., Tensor], list[tuple[int, ...]]]] = {
    "matmul": (tt.matmul, [(3, 4), (4, 2)]),
    "linear": (tt.linear, [(4, 3), (3, 2), (2,)]),
    "add": (tt.add, [(3, 4), (3, 4)]),
    "add_bias": (tt.add, [(3, 4), (4,)]),
    "sub": (tt.sub, [(2, 3), (2, 3)]),
    "mul": (tt.mul, [(4, 4), (4, 4)]),
    "scale": (lambda a: tt.scale(a, -1.7), [(3, 3)]),
    "relu": (tt.relu, [(4, 4)]),
    "transpose": (tt.transpose, [(2, 4)]),
    "reshape": (lambda a: tt.reshape(a, (3, 4)), [(4, 3)]),
    "concat_cols": (tt.concat_cols, [(3, 2), (3, 3)]),
    "max_over_rows": (tt.max_over_rows, [(4, 3)]),
    "group_max": (lambda a: tt.group_max(a, 2), [(4, 3)]),
    "mean_over_rows": (tt.mean_over_rows, [(4, 3)]),
    "standardize_rows": (tt.standardize_rows, [(4, 3)]),
    "softmax_rows": (tt.softmax_rows, [(3, 4)]),
    "gather_rows": (lambda a: tt.gather_rows(a, [1, 0, 1, 3]), [(4, 2)]),
    "sum_all": (tt.sum_all, [(3, 2)]),
    "log_softmax_nll": (lambda a: tt.log_softmax_nll(a, [0, 2, 1]), [(3, 4)]),
    "self_attention": (lambda f, *w: att.self_attention(f, _attn(w)), [(4, 8)] + _W8),
    "cross_attention": (
        lambda a, b, g, *w: att.cross_attention_trio(a, b, g, _attn(w)),
        [(4, 8)] * 3 + _W8,
    ),
    "cross_attention_unscaled": (
        lambda a, b, g, *w: att.cross_attention_trio(a, b, g, _attn(w), scaled=False),
        [(4, 8)] * 3 + _W8,
    ),
    "clca": (lambda a, b, c, *w: att.clca([a, b, c], _fusion(w)), [(4, 8)] * 3 + _W8 * 4),
    "csca": (lambda a, b, c, *w: att.csca(a, b, c, _fusion(w)), [(4, 8)] * 3 + _W8 * 4),
}


def _attention_input_scale(name: str, shapes, arrays):
    # attention weights drawn like the real initialisation keep softmax out of saturation
    if name in ("self_attention", "cross_attention", "cross_attention_unscaled", "clca", "csca"):
        return [a if s[0] == 4 else a / math.sqrt(8) for a, s in zip(arrays, shapes)]
    return arrays


def grad_suite(seed: int = 0, per_case: int = 5) -> list[CheckResult]:
    """Finite-difference checks of every op and attention block, then the whole network."""

    def ops():
        worst, count = 0.0, 0
        for name, (fn, shapes) in GRAD_CASES.items():
            for i in range(per_case):
                rng = np.random.default_rng([seed, i, len(name)])
                arrays = _attention_input_scale(name, shapes, [_rand(rng, s) for s in shapes])
                rep = tt.finite_diff_check(fn, [Tensor(a) for a in arrays], tol=GRAD_TOL)
                worst = max(worst, rep.max_rel_err)
                count += 1
        return count, worst

    def end_to_end():
        worst = 0.0
        for k, task in enumerate(M.TASKS):
            cfg = M.miniature(task)
            params = M.init_params(cfg, np.random.default_rng([seed, 77, k]))
            rng = np.random.default_rng([seed, 78, k])
            pc = PointCloud(rng.uniform(-1, 1, (cfg.input_points, 3)))
            target = 1 if task == "classification" else rng.integers(0, cfg.num_classes, cfg.input_points)
            names = list(params)
            plan = M.plan_cloud(pc, cfg)

            def f(*ws):
                return M.cross_entropy(M.forward(pc, cfg, dict(zip(names, ws)), plan=plan), target, task)

            rep = tt.finite_diff_check(f, [params[n] for n in names], tol=E2E_GRAD_TOL)
            worst = max(worst, rep.max_rel_err)
        return len(M.TASKS), worst

    return [
        _timed("gradients: ops and attention blocks", GRAD_TOL, ops),
        _timed("gradients: end-to-end 64-point network", E2E_GRAD_TOL, end_to_end),
    ]


# ---------------------------------------------------------------------------
# permutation symmetry


def invariance_suite(seed: int = 0, clouds: int = 50) -> list[CheckResult]:
    def network(task):
        cfg = M.miniature(task)
        params = M.init_params(cfg, np.random.default_rng([seed, 5]))
        worst = 0.0
        for i in range(clouds):
            rng = np.random.default_rng([seed, 6, i])
            pc = PointCloud(rng.uniform(-1, 1, (cfg.input_points, 3)))
            perm = rng.permutation(cfg.input_points)
            a = M.forward(pc, cfg, params).data
            b = M.forward(pc.take(perm), cfg, params).data
            diff = a - b if task == "classification" else a[perm] - b
            worst = max(worst, float(np.abs(diff).max()))
        return clouds, worst

    def blocks():
        worst = 0.0
        for i in range(clouds):
            rng = np.random.default_rng([seed, 7, i])
            c = 8
            p = att.FusionParams(
                tuple(att.AttentionParams.init(c, rng) for _ in range(3)),
                att.AttentionParams.init(c, rng),
            )
            xs = [rng.normal(size=(12, c)) for _ in range(3)]
            perm = rng.permutation(12)
            for fn in (att.clca, lambda x, q: att.csca(*x, q)):
                a = fn([Tensor(x) for x in xs], p).data
                b = fn([Tensor(x[perm]) for x in xs], p).data
                worst = max(worst, float(np.abs(a[perm] - b).max()))
            sa = att.self_attention(Tensor(xs[0]), p.branch[0]).data
            sb = att.self_attention(Tensor(xs[0][perm]), p.branch[0]).data
            worst = max(worst, float(np.abs(sa[perm] - sb).max()))
        return clouds, worst

    return [
        _timed("invariance: classification logits", INVARIANCE_TOL, lambda: network("classification")),
        _timed("equivariance: segmentation logits", INVARIANCE_TOL, lambda: network("segmentation")),
        _timed("equivariance: attention blocks", ATTENTION_TOL, blocks),
    ]


# ---------------------------------------------------------------------------
# brute-force references


def _d(p, q) -> float:
    dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def ref_fps(pts, m):
    pts = [tuple(p) for p in pts]
    chosen = [min(range(len(pts)), key=lambda i: (pts[i], i))]
    while len(chosen) < m:
        rest = [i for i in range(len(pts)) if i not in chosen]
        far = {i: min(_d(pts[i], pts[c]) for c in chosen) for i in rest}
        chosen.append(min(rest, key=lambda i: (-far[i], pts[i], i)))
    return chosen


def _ranked(pts, q):
    return sorted((_d(q, p), tuple(p), i) for i, p in enumerate(pts))


def ref_ball(pts, centroids, r, k):
    out = []
    for c in centroids:
        inside = [i for d, _, i in _ranked(pts, pts[c]) if d <= r][:k]
        out.append(inside + [inside[0]] * (k - len(inside)))
    return out


def ref_knn(query, source, k):
    return [[i for _, _, i in _ranked(source, q)[:k]] for q in query]


def ref_interp(feats, source, query, k=3, eps=geometry.INTERP_EPS):
    out = np.zeros((len(query), feats.shape[1]))
    for row, q in enumerate(query):
        near = _ranked(source, q)[:k]
        w = [1.0 / (d + eps) for d, _, _ in near]
        for (_, _, i), wi in zip(near, w):
            out[row] += wi / sum(w) * feats[i]
    return out


def ref_oa_acc(y, p, n):
    hits = [0] * n
    seen = [0] * n
    for t, q in zip(y, p):
        seen[t] += 1
        hits[t] += t == q
    recalls = [h / s for h, s in zip(hits, seen) if s]
    return sum(hits) / len(y), sum(recalls) / len(recalls)


def ref_shape_iou(pred, gt, parts):
    total = 0.0
    for part in parts:
        a = {i for i, v in enumerate(pred) if v == part}
        b = {i for i, v in enumerate(gt) if v == part}
        total += 1.0 if not a | b else len(a & b) / len(a | b)
    return total / len(parts)


def oracle_suite(seed: int = 0, instances: int = 200) -> list[CheckResult]:
    kinds = ("fps", "ball_query", "knn", "interpolation", "metrics", "miou")

    def cloud(rng):
        n = int(rng.integers(4, 33))
        if rng.random() < 0.5:
            # coarse lattice: exercises every tie-break
            return rng.integers(-3, 4, size=(n, 3)) / 4.0
        return rng.uniform(-1, 1, size=(n, 3))

    def run(kind):
        def body():
            worst, count = 0.0, 0
            for i in range(math.ceil(instances / len(kinds))):
                rng = np.random.default_rng([seed, kinds.index(kind), i])
                pts = cloud(rng)
                n = len(pts)
                if kind == "fps":
                    m = int(rng.integers(1, n + 1))
                    ok = geometry.farthest_point_sample(pts, m).tolist() == ref_fps(pts, m)
                    worst = max(worst, 0.0 if ok else math.inf)
                elif kind == "ball_query":
                    cents = rng.choice(n, size=min(n, 5), replace=False)
                    r, k = float(rng.uniform(0.2, 1.5)), int(rng.integers(1, 10))
                    got = geometry.ball_query_indices(pts, cents, r, k).tolist()
                    worst = max(worst, 0.0 if got == ref_ball(pts, cents, r, k) else math.inf)
                elif kind == "knn":
                    q = rng.uniform(-1, 1, size=(5, 3))
                    k = int(rng.integers(1, n + 1))
                    got = geometry.knn(q, pts, k)[0].tolist()
                    worst = max(worst, 0.0 if got == ref_knn(q, pts, k) else math.inf)
                elif kind == "interpolation":
                    q = rng.uniform(-1, 1, size=(6, 3))
                    f = rng.normal(size=(n, 4))
                    k = min(3, n)
                    got = geometry.interpolate_knn(Tensor(f), pts, q, k).data
                    worst = max(worst, float(np.abs(got - ref_interp(f, pts, q, k)).max()))
                elif kind == "metrics":
                    y, p = rng.integers(0, 4, n), rng.integers(0, 4, n)
                    got = train.classification_metrics(y, p, 4)
                    oa, acc = ref_oa_acc(y.tolist(), p.tolist(), 4)
                    worst = max(worst, abs(got["oa"] - oa), abs(got["acc"] - acc))
                else:
                    parts = [1, 2, 3]
                    gt, pred = rng.choice(parts, n), rng.choice(parts, n)
                    got = train.shape_iou(pred, gt, parts)
                    worst = max(worst, abs(got - ref_shape_iou(pred.tolist(), gt.tolist(), parts)))
                count += 1
            return count, worst

        return _timed(f"oracle: {kind}", VALUE_TOL, body)

    return [run(k) for k in kinds]


SUITES = {"grad": grad_suite, "invariance": invariance_suite, "oracle": oracle_suite}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    return SUITES[name](seed=seed)
