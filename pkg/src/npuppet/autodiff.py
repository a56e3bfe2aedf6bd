"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array plus the closure that routes its output
gradient to its parents. Graphs are built eagerly by calling ops and
differentiated by ``backward`` on a scalar loss. There is no broadcasting
beyond scalar-times-array; mismatched shapes raise ShapeError naming the
operation. Dedicated ops cover the two shapes of structured addition the
models need (channel bias, row gather).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EngineError, NumericError, ShapeError

Array = np.ndarray


def _as_f64(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """Node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backprop=None, _op: str = "leaf"):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backprop = _backprop
        self._op = _op
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate .grad on every reachable tensor with requires_grad."""
        if self.data.shape != ():
            raise EngineError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_done:
            raise EngineError("backward already ran on this graph; rebuild the graph before differentiating again")
        self._backward_done = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    # operator sugar; scalars are lifted to constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative so deep chains cannot overflow."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def param(data, name: str | None = None) -> Tensor:
    t = Tensor(data, requires_grad=True)
    return t


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def _is_scalar(t: Tensor) -> bool:
    return t.data.shape == ()


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b), _op="add")

    def backprop(g):
        if a.requires_grad:
            a._accum(g if not _is_scalar(a) or g.shape == () else np.sum(g))
        if b.requires_grad:
            b._accum(g if not _is_scalar(b) or g.shape == () else np.sum(g))

    out._backprop = backprop
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad, (a, b), _op="sub")

    def backprop(g):
        if a.requires_grad:
            a._accum(g if not _is_scalar(a) or g.shape == () else np.sum(g))
        if b.requires_grad:
            b._accum(-g if not _is_scalar(b) or g.shape == () else -np.sum(g))

    out._backprop = backprop
    return out


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data, a.requires_grad, (a,), _op="neg")

    def backprop(g):
        if a.requires_grad:
            a._accum(-g)

    out._backprop = backprop
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b), _op="mul")

    def backprop(g):
        if a.requires_grad:
            ga = g * b.data
            a._accum(ga if not _is_scalar(a) or ga.shape == () else np.sum(ga))
        if b.requires_grad:
            gb = g * a.data
            b._accum(gb if not _is_scalar(b) or gb.shape == () else np.sum(gb))

    out._backprop = backprop
    return out


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b), _op="matmul")

    def backprop(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._backprop = backprop
    return out


# ------------------------------------------------------------ nonlinearities

def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    pos = a.data >= 0
    out = Tensor(np.where(pos, a.data, slope * a.data), a.requires_grad, (a,), _op="leaky_relu")

    def backprop(g):
        if a.requires_grad:
            a._accum(np.where(pos, g, slope * g))

    out._backprop = backprop
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    out = Tensor(y, a.requires_grad, (a,), _op="tanh")

    def backprop(g):
        if a.requires_grad:
            a._accum(g * (1.0 - y * y))

    out._backprop = backprop
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = _lift(a)
    inside = (a.data > lo) & (a.data < hi)
    out = Tensor(np.clip(a.data, lo, hi), a.requires_grad, (a,), _op="clip")

    def backprop(g):
        if a.requires_grad:
            a._accum(np.where(inside, g, 0.0))

    out._backprop = backprop
    return out


# ----------------------------------------------------------------- reductions

def tsum(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.sum(a.data), a.requires_grad, (a,), _op="sum")

    def backprop(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, float(g)))

    out._backprop = backprop
    return out


def tmean(a) -> Tensor:
    a = _lift(a)
    n = a.data.size
    out = Tensor(np.mean(a.data), a.requires_grad, (a,), _op="mean")

    def backprop(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, float(g) / n))

    out._backprop = backprop
    return out


def sqnorm(a) -> Tensor:
    """Sum of squared entries."""
    a = _lift(a)
    out = Tensor(np.sum(a.data * a.data), a.requires_grad, (a,), _op="sqnorm")

    def backprop(g):
        if a.requires_grad:
            a._accum(2.0 * float(g) * a.data)

    out._backprop = backprop
    return out


def l1norm(a) -> Tensor:
    """Sum of absolute entries; subgradient sign(x), 0 at 0."""
    a = _lift(a)
    out = Tensor(np.sum(np.abs(a.data)), a.requires_grad, (a,), _op="l1norm")

    def backprop(g):
        if a.requires_grad:
            a._accum(float(g) * np.sign(a.data))

    out._backprop = backprop
    return out


# -------------------------------------------------------------- restructuring

def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _check_same_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise NumericError("div: zero denominator")
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad, (a, b), _op="div")

    def backprop(g):
        if a.requires_grad:
            ga = g / b.data
            a._accum(ga if not _is_scalar(a) or ga.shape == () else np.sum(ga))
        if b.requires_grad:
            gb = -g * a.data / (b.data * b.data)
            b._accum(gb if not _is_scalar(b) or gb.shape == () else np.sum(gb))

    out._backprop = backprop
    return out


def expand_last(a, n: int) -> Tensor:
    """Append a new trailing axis of length n by repetition."""
    a = _lift(a)
    y = np.repeat(a.data[..., None], int(n), axis=-1)
    out = Tensor(y, a.requires_grad, (a,), _op="expand_last")

    def backprop(g):
        if a.requires_grad:
            a._accum(np.sum(g, axis=-1))

    out._backprop = backprop
    return out


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from exc
    out = Tensor(y, a.requires_grad, (a,), _op="reshape")

    def backprop(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    out._backprop = backprop
    return out


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[p.data.shape for p in parts]} do not stack on axis {axis}") from exc
    out = Tensor(y, any(p.requires_grad for p in parts), tuple(parts), _op="concat")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    out._backprop = backprop
    return out


def tslice(a, key) -> Tensor:
    """Basic slicing (views only: slices, ints, ellipsis)."""
    a = _lift(a)
    y = a.data[key]
    out = Tensor(y, a.requires_grad, (a,), _op="slice")

    def backprop(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a._accum(full)

    out._backprop = backprop
    return out


def take(a, indices, axis: int = 0) -> Tensor:
    """Row gather; duplicate indices accumulate in the backward pass."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    y = np.take(a.data, idx, axis=axis)
    out = Tensor(y, a.requires_grad, (a,), _op="take")

    def backprop(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if axis == 0:
                np.add.at(full, idx, g)
            else:
                moved = np.moveaxis(full, axis, 0)
                np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            a._accum(full)

    out._backprop = backprop
    return out


# ------------------------------------------------------------------ conv / fc

def bias_channels(x, b) -> Tensor:
    """Add a per-channel bias to a channels-last array."""
    x, b = _lift(x), _lift(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias_channels: input {x.data.shape} incompatible with bias {b.data.shape}")
    out = Tensor(x.data + b.data, x.requires_grad or b.requires_grad, (x, b), _op="bias_channels")

    def backprop(g):
        if x.requires_grad:
            x._accum(g)
        if b.requires_grad:
            b._accum(g.reshape(-1, b.data.shape[0]).sum(axis=0))

    out._backprop = backprop
    return out


def _conv_geometry(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw} stride {stride} pad {pad}")
    return ho, wo


def conv2d(x, w, stride: int = 2, pad: int = 2) -> Tensor:
    """2D convolution, channels-last: (H,W,Cin) * (Kh,Kw,Cin,Cout) -> (Ho,Wo,Cout)."""
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected (H,W,Cin) and (Kh,Kw,Cin,Cout), got {x.data.shape} and {w.data.shape}")
    h, wid, cin = x.data.shape
    kh, kw, cin_w, cout = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    ho, wo = _conv_geometry(h, wid, kh, kw, stride, pad)

    xp = np.zeros((h + 2 * pad, wid + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + wid, :] = x.data

    # im2col via strided view, then one matmul
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(ho, wo, kh, kw, cin),
        strides=(s0 * stride, s1 * stride, s0, s1, s2),
        writeable=False,
    ).reshape(ho * wo, kh * kw * cin)
    y = (cols @ w.data.reshape(kh * kw * cin, cout)).reshape(ho, wo, cout)
    out = Tensor(y, x.requires_grad or w.requires_grad, (x, w), _op="conv2d")

    def backprop(g):
        gflat = g.reshape(ho * wo, cout)
        if w.requires_grad:
            w._accum((cols.T @ gflat).reshape(kh, kw, cin, cout))
        if x.requires_grad:
            gcols = (gflat @ w.data.reshape(kh * kw * cin, cout).T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            iy = (np.arange(ho)[:, None] * stride + np.arange(kh)[None, :]).reshape(ho, 1, kh, 1, 1)
            ix = (np.arange(wo)[:, None] * stride + np.arange(kw)[None, :]).reshape(1, wo, 1, kw, 1)
            ic = np.arange(cin).reshape(1, 1, 1, 1, cin)
            np.add.at(gxp, (iy, ix, ic), gcols)
            x._accum(gxp[pad:pad + h, pad:pad + wid, :])

    out._backprop = backprop
    return out


# ---------------------------------------------------------------- grad check

@dataclass
class GradReport:
    """Analytic-vs-numeric gradient comparison for one probed function."""

    max_abs_err: float
    max_rel_err: float
    per_param: dict[str, tuple[float, float]] = field(default_factory=dict)
    samples: list[tuple[str, float, float]] = field(default_factory=list)

    def ok(self, rel_tol: float) -> bool:
        return self.max_rel_err <= rel_tol


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(fn, params: dict[str, Array], h: float = 1e-5, rng: np.random.Generator | None = None,
               subsample_threshold: int = 10_000, subsample_size: int = 64) -> GradReport:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` receives a dict of leaf Tensors and must return a scalar Tensor.
    Parameters with more than ``subsample_threshold`` total coordinates are
    probed on a random subsample of at least ``subsample_size`` coordinates.
    """
    leaves = {k: param(v.copy()) for k, v in params.items()}
    loss = fn(leaves)
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    total = sum(v.size for v in params.values())
    if rng is None:
        rng = np.random.default_rng(0)

    def eval_at(probe: dict[str, Array]) -> float:
        ts = {k: param(v) for k, v in probe.items()}
        val = float(fn(ts).data)
        if not np.isfinite(val):
            raise NumericError("non-finite function value at finite-difference probe point")
        return val

    report = GradReport(0.0, 0.0)
    for name, arr in params.items():
        flat = arr.reshape(-1)
        n = flat.size
        if total > subsample_threshold and n > subsample_size:
            coords = rng.choice(n, size=subsample_size, replace=False)
        else:
            coords = np.arange(n)
        max_abs = 0.0
        max_rel = 0.0
        for c in coords:
            base = {k: v.copy() for k, v in params.items()}
            base[name].reshape(-1)[c] += h
            fp = eval_at(base)
            base[name].reshape(-1)[c] -= 2 * h
            fm = eval_at(base)
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[name].reshape(-1)[c])
            max_abs = max(max_abs, abs(a - numeric))
            max_rel = max(max_rel, _rel_err(a, numeric))
            if len(report.samples) < 8:
                report.samples.append((f"{name}[{c}]", a, numeric))
        report.per_param[name] = (max_abs, max_rel)
        report.max_abs_err = max(report.max_abs_err, max_abs)
        report.max_rel_err = max(report.max_rel_err, max_rel)
    return report
