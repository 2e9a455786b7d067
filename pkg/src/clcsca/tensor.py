"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable operation records its inputs and a closure that maps the
output gradient to input gradients. ``backward`` walks the recorded nodes in
exact reverse creation order, so gradients are deterministic for a given
forward pass.

Only one broadcast is supported: a bias vector added to every row of a
matrix. Any other shape disagreement raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, ShapeError

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array that can take part in the differentiation graph.

    ``node`` is the creation sequence number; it orders the tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "node", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.node = next(_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.node = next(_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _require_2d(x: Tensor, name: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{name} expects a 2-d tensor, got shape {x.shape}")


def trace(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in creation order (the tape)."""
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node in seen:
            continue
        seen[t.node] = t
        stack.extend(t._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are reset.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    nodes = trace(loss)
    for t in nodes:
        if t._backward is not None:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(nodes):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _record(a.data @ b.data, (a, b), "matmul", grad_fn)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W`` plus an optional bias broadcast over rows."""
    _require_2d(x, "linear")
    _require_2d(W, "linear")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear input width {x.shape} does not match weight {W.shape}")
    out = x.data @ W.data
    parents = (x, W)
    if b is not None:
        if b.size != W.shape[1]:
            raise ShapeError(f"bias {b.shape} does not match weight {W.shape}")
        out = out + b.data.reshape(-1)
        parents = (x, W, b)

    def grad_fn(g):
        if x.requires_grad:
            _accumulate(x, g @ W.data.T)
        if W.requires_grad:
            _accumulate(W, x.data.T @ g)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=0).reshape(b.shape))

    return _record(out, parents, "linear", grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector broadcast over rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def grad_fn(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _record(a.data + b.data, (a, b), "add", grad_fn)
    if a.data.ndim == 2 and b.size == a.shape[1] and (b.data.ndim == 1 or b.shape[0] == 1):
        def grad_fn(g):
            _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0).reshape(b.shape))

        return _record(a.data + b.data.reshape(-1), (a, b), "add", grad_fn)
    raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")


def add_n(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes disagree: {a.shape} vs {b.shape}")

    def grad_fn(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _record(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes disagree: {a.shape} vs {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _record(a.data * b.data, (a, b), "mul", grad_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def grad_fn(g):
        _accumulate(x, g * s)

    return _record(x.data * s, (x,), "scale", grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # relu'(0) = 0

    def grad_fn(g):
        _accumulate(x, g * mask)

    return _record(np.where(mask, x.data, 0.0), (x,), "relu", grad_fn)


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")

    def grad_fn(g):
        _accumulate(x, g.T)

    return _record(np.ascontiguousarray(x.data.T), (x,), "transpose", grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")

    def grad_fn(g):
        _accumulate(x, g.reshape(x.shape))

    return _record(x.data.reshape(shape), (x,), "reshape", grad_fn)


def concat_cols(*xs: Tensor) -> Tensor:
    if len(xs) == 1 and not isinstance(xs[0], Tensor):
        xs = tuple(xs[0])
    for x in xs:
        _require_2d(x, "concat_cols")
    rows = xs[0].shape[0]
    if any(x.shape[0] != rows for x in xs):
        raise ShapeError(f"concat_cols row counts disagree: {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def grad_fn(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                _accumulate(x, g[:, lo:hi])

    return _record(np.concatenate([x.data for x in xs], axis=1), xs, "concat_cols", grad_fn)


def max_over_rows(x: Tensor) -> Tensor:
    """Column-wise maximum, shape (1, C). Ties route gradient to the first row."""
    _require_2d(x, "max_over_rows")
    return group_max(x, x.shape[0])


def group_max(x: Tensor, k: int) -> Tensor:
    """Max over consecutive blocks of ``k`` rows: (M*k, C) -> (M, C)."""
    _require_2d(x, "group_max")
    rows, cols = x.shape
    if k < 1 or rows % k:
        raise ShapeError(f"group_max: {rows} rows not divisible into groups of {k}")
    blocks = x.data.reshape(rows // k, k, cols)
    arg = blocks.argmax(axis=1)
    m_idx = np.arange(rows // k)[:, None]
    c_idx = np.arange(cols)[None, :]
    out = blocks[m_idx, arg, c_idx]

    def grad_fn(g):
        gx = np.zeros_like(blocks)
        gx[m_idx, arg, c_idx] = g
        _accumulate(x, gx.reshape(rows, cols))

    return _record(out, (x,), "group_max", grad_fn)


def mean_over_rows(x: Tensor) -> Tensor:
    _require_2d(x, "mean_over_rows")
    n = x.shape[0]

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape).copy())

    return _record(x.data.mean(axis=0, keepdims=True), (x,), "mean_over_rows", grad_fn)


def standardize_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per column: subtract the mean over rows and divide by sqrt(var + eps)."""
    _require_2d(x, "standardize_rows")
    centred = x.data - x.data.mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt((centred**2).mean(axis=0, keepdims=True) + eps)
    y = centred * inv

    def grad_fn(g):
        _accumulate(x, inv * (g - g.mean(axis=0, keepdims=True) - y * (g * y).mean(axis=0, keepdims=True)))

    return _record(y, (x,), "standardize_rows", grad_fn)


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        _accumulate(x, np.full(x.shape, g.reshape(-1)[0]))

    return _record(np.array([x.data.sum()]), (x,), "sum", grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    _require_2d(x, "softmax_rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        _accumulate(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _record(y, (x,), "softmax_rows", grad_fn)


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` selected by an integer index array (repeats allowed)."""
    _require_2d(x, "gather_rows")
    index = np.asarray(index, dtype=np.intp).reshape(-1)

    def grad_fn(g):
        order = np.argsort(index, kind="stable")
        sorted_idx = index[order]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        gx = np.zeros_like(x.data)
        gx[sorted_idx[starts]] = np.add.reduceat(g[order], starts, axis=0)
        _accumulate(x, gx)

    return _record(x.data[index], (x,), "gather_rows", grad_fn)


def log_softmax_nll(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax.

    ``reduction`` is ``"mean"`` or ``"sum"`` over rows.
    """
    _require_2d(logits, "log_softmax_nll")
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    rows, classes = logits.shape
    if targets.shape[0] != rows:
        raise ShapeError(f"{targets.shape[0]} targets for {rows} logit rows")
    if targets.min() < 0 or targets.max() >= classes:
        raise ContractError(f"target outside [0, {classes})")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_z
    picked = logp[np.arange(rows), targets]
    norm = rows if reduction == "mean" else 1
    loss = -picked.sum() / norm

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(rows), targets] -= 1.0
        _accumulate(logits, p * (g.reshape(-1)[0] / norm))

    return _record(np.array([loss]), (logits,), "nll", grad_fn)


def init_linear(
    name: str,
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    bias: bool = True,
    zero: bool = False,
    relu_gain: bool = True,
) -> dict[str, Tensor]:
    """Weight and bias for ``x @ W + b``.

    Layers feeding a relu get the He-uniform bound sqrt(6 / fan_in), which keeps
    activation variance steady through a stack with no normalisation layer;
    other layers use 1/sqrt(fan_in). Biases always use 1/sqrt(fan_in).
    """
    bound = 1.0 / np.sqrt(fan_in)
    if zero:
        W = np.zeros((fan_in, fan_out))
    else:
        w_bound = np.sqrt(6.0 / fan_in) if relu_gain else bound
        W = rng.uniform(-w_bound, w_bound, size=(fan_in, fan_out))
    out = {f"{name}.W": Tensor(W, requires_grad=True)}
    if bias:
        out[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    rel_errors: list[np.ndarray] = field(repr=False)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries absolute."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    wrt: Iterable[int] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    Non-scalar outputs are reduced with a fixed pseudo-random projection so that
    every output element contributes. ``wrt`` restricts which inputs are checked.
    """
    single = isinstance(x, Tensor)
    inputs = [x] if single else list(x)
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    leaves = [Tensor(t.data.copy(), requires_grad=(i in wrt)) for i, t in enumerate(inputs)]

    out = f(*leaves)
    proj = np.random.default_rng(12345).uniform(0.5, 1.5, size=out.shape)

    def reduce(o: Tensor) -> Tensor:
        return sum_all(mul(o, Tensor(proj)))

    backward(reduce(out))

    errs, max_rel, max_abs = [], 0.0, 0.0
    for i in wrt:
        leaf = leaves[i]
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = reduce(f(*leaves)).item()
                flat[j] = orig - step
                down = reduce(f(*leaves)).item()
                flat[j] = orig
                numeric.reshape(-1)[j] = (up - down) / (2 * step)
        rel = relative_error(analytic, numeric, floor)
        errs.append(rel)
        max_rel = max(max_rel, float(rel.max()))
        max_abs = max(max_abs, float(np.abs(analytic - numeric).max()))
    return GradCheckReport(max_rel, max_abs, errs, tol)


# ---------------------------------------------------------------------------
# checkpoint files

CHECKPOINT_MAGIC = b"CLCW"
CHECKPOINT_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in insertion order.

    Layout (little-endian): ``CLCW``, u32 version, u32 count, then per entry
    u32 name length, UTF-8 name, u32 rank, rank x u64 dims, float64 values.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated: needed {n} bytes", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        start = pos
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not UTF-8", start) from exc
        if name in out:
            raise FormatError(f"duplicate parameter {name!r}", start)
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last parameter", pos)
    return out
