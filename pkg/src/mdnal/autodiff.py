"""Minimal dense reverse-mode differentiation on top of numpy.

Every op returns a new :class:`Tensor` holding its forward value and a
closure that maps the output gradient to operand gradients.  The graph is
rebuilt on every forward pass; :func:`backward` walks it once in reverse
topological order.

All values are float64.  A non-finite value produced by any op raises
:class:`NonFiniteError` immediately, so a bad step is caught where it
happens rather than several ops later.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-300


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class NonDeterministicError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    """Leaf tensor that receives a gradient."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(op: str, value: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def apply(op: str, forward: Callable[..., np.ndarray], vjp: Callable, *inputs) -> Tensor:
    """Register a custom op.

    ``forward`` maps operand arrays to the output array; ``vjp(g, out, *arrays)``
    returns one gradient array per operand.
    """
    ts = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in ts]
    out = np.asarray(forward(*arrays), dtype=np.float64)
    return _make(op, out, ts, lambda g: vjp(g, out, *arrays))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make("div", out, (a, b), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    """Natural log on inputs clamped to at least 1e-300 (zero gradient where clamped)."""
    x = as_tensor(x)
    xd = x.data
    clamped = xd < LOG_FLOOR
    safe = np.where(clamped, LOG_FLOOR, xd)
    return _make("log", np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(x.data)
    # d/dx sqrt at 0 is infinite; treat as 0 so zero-variance branches stay finite
    return _make("sqrt", out, (x,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data >= lo
    return _make("clamp_min", np.where(mask, x.data, lo), (x,), lambda g: (g * mask,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * s,))


# ---------------------------------------------------------------- reductions

def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _make("sum", out, (x,), lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def tmax(x, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient is split evenly across tied maxima."""
    x = as_tensor(x)
    xd = x.data
    out_k = xd.max(axis=axis, keepdims=True)
    mask = (xd == out_k).astype(np.float64)
    mask /= mask.sum(axis=axis, keepdims=True)
    out = out_k if keepdims else (out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis))
    shape = xd.shape
    return _make("max", out, (x,), lambda g: (_expand(g, shape, axis, keepdims) * mask,))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), vjp)


def log_softmax(x) -> Tensor:
    """log(softmax(x)) over the last axis, computed as x - logsumexp(x)."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make("log_softmax", out, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        if bd.ndim == 2 and ad.ndim > 2:
            a2 = reshape(a, (-1, ad.shape[-1]))
            return reshape(matmul(a2, b), ad.shape[:-1] + (bd.shape[-1],))
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def index(x, key) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data[key]
    basic = all(k is None or k is Ellipsis or isinstance(k, (int, slice))
                for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make("index", np.array(out, copy=True), (x,), vjp)


def gather(x, idx, axis: int = -1) -> Tensor:
    """np.take_along_axis with a scatter-add backward."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.ndim != x.data.ndim:
        raise ShapeError("gather", x.shape, idx.shape)
    try:
        out = np.take_along_axis(x.data, idx, axis=axis)
    except (ValueError, IndexError):
        raise ShapeError("gather", x.shape, idx.shape) from None
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        ax = axis % len(shape)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _make("gather", out, (x,), vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """NHWC convolution via im2col and a single matmul.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    cols = np.empty((B, Ho, Wo, kh * kw, Cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * Cin)
    w2 = w.data.reshape(kh * kw * Cin, Cout)
    out = (cols2 @ w2).reshape(B, Ho, Wo, Cout)

    def vjp(g):
        g2 = g.reshape(-1, Cout)
        dw = (cols2.T @ g2).reshape(w.shape)
        if not x.requires_grad:
            return None, dw
        dcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh * kw, Cin)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, i * kw + j, :]
        dx = dxp[:, pad:pad + H, pad:pad + W, :] if pad else dxp
        return dx, dw

    return _make("conv2d", out, (x, w), vjp)


# ---------------------------------------------------------------- graph

@dataclass
class Graph:
    """Nodes reachable from a root, operands before users."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    If ``params`` is given, their gradients are returned in order; a param
    the root does not depend on gets zeros.
    """
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    params = list(params) if params is not None else None
    if params is not None:
        for p in params:
            p.grad = None
    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        graph = Graph.from_root(root)
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if not p.requires_grad or pg is None:
                    continue
                pid = id(p)
                grads[pid] = grads[pid] + pg if pid in grads else np.asarray(pg, dtype=np.float64)
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------- checks

@dataclass
class FDReport:
    max_rel_err: float
    passed: bool
    per_param: list


def finite_diff_check(fn: Callable[[list[Tensor]], Tensor], params: Sequence, step: float = 1e-5,
                      tolerance: float = 1e-4, floor: float = 1e-3) -> FDReport:
    """Compare analytic gradients of ``fn`` against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    ``fn`` must be deterministic; any noise must be frozen by the caller.
    """
    base = [np.array(as_tensor(p).data, dtype=np.float64) for p in params]
    leaves = [param(b) for b in base]
    out = fn(leaves)
    f0 = out.item()
    again = fn([Tensor(b) for b in base]).item()
    if f0 != again:
        raise NonDeterministicError(f"fn returned {f0!r} then {again!r} at the same point")
    analytic = backward(out, leaves)

    per, worst = [], 0.0
    for pi, b in enumerate(base):
        num = np.zeros_like(b)
        flat = num.reshape(-1)
        for j in range(b.size):
            vals = []
            for sgn in (1.0, -1.0):
                shifted = [x.copy() for x in base]
                shifted[pi].reshape(-1)[j] += sgn * step
                vals.append(fn([Tensor(x) for x in shifted]).item())
            flat[j] = (vals[0] - vals[1]) / (2 * step)
        a = analytic[pi]
        rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        m = float(rel.max()) if rel.size else 0.0
        per.append(m)
        worst = max(worst, m)
    return FDReport(worst, worst <= tolerance, per)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MDNALCKP"
CHECKPOINT_VERSION = 1


def save_params(path, params: dict) -> None:
    """Write ``name -> float64 array`` records.

    Layout (little-endian): magic ``MDNALCKP``; u32 version; u32 count; then per
    record u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims, raw float64 data.
    Records are written in sorted name order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(np.asarray(params[name].data if isinstance(params[name], Tensor)
                                                  else params[name], dtype="<f8"))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 16, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
