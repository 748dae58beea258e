"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Only the operators the network and the losses need are provided.  Every op
takes :class:`DiffArray` (or plain array / scalar constants) and returns a new
:class:`DiffArray` that remembers its parents and a closure mapping the output
gradient to the parents' gradients.  :func:`backward` sorts the reachable graph
into a :class:`Tape` and replays it in reverse.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DiffArray", "Tape", "ShapeError", "as_diff", "backward",
    "add", "sub", "mul", "div", "neg", "relu", "sigmoid", "softplus",
    "exp", "log", "abs_", "maximum_const", "matmul", "concat", "sum_", "mean",
    "reshape", "transpose", "take", "l2_normalize_lastdim", "softmax_lastdim",
    "euclidean_distance_matrix", "conv2d", "maxpool2", "bilinear_resize",
    "bilinear_sample", "depth_to_space", "resize_matrix",
]


class ShapeError(ValueError):
    pass


class DiffArray:
    """A float64 array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[DiffArray, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffArray":
        return DiffArray(self.data)

    def __repr__(self) -> str:
        return f"DiffArray(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _node(data: np.ndarray, parents: Sequence[DiffArray], fn, op: str) -> DiffArray:
    # Constant subgraphs are not recorded at all.
    if any(p.requires_grad for p in parents):
        return DiffArray(data, True, _parents=tuple(parents), _backward=fn, op=op)
    return DiffArray(data, op=op)


class Tape:
    """Topologically ordered record of the operations reachable from a root.

    Every node appears after all of its inputs.  Replaying the tape in reverse
    accumulates adjoints.
    """

    def __init__(self, root: DiffArray):
        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[DiffArray]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: DiffArray) -> Tape:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out = a.data * b.data

    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), fn, "mul")


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out = a.data / b.data

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), fn, "div")


def neg(a) -> DiffArray:
    a = as_diff(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> DiffArray:
    a = as_diff(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    x = a.data
    # two-branch form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> DiffArray:
    """log(1 + exp(x)), stable for large |x|."""
    a = as_diff(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def exp(a) -> DiffArray:
    a = as_diff(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DiffArray:
    a = as_diff(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a) -> DiffArray:
    a = as_diff(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def maximum_const(a, c: float) -> DiffArray:
    """max(a, c) against a constant; the gradient passes only where a > c."""
    a = as_diff(a)
    mask = a.data > c
    return _node(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "maximum_const")


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> DiffArray:
    a = as_diff(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, index, axis: int = 0) -> DiffArray:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_diff(a)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise ShapeError("take expects a 1-d index array")
    out = np.take(a.data, index, axis=axis)

    def fn(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(out, (a,), fn, "take")


def concat(arrays: Sequence, axis: int = 1) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    out = np.concatenate([x.data for x in arrays], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(arrays)))

    return _node(out, arrays, fn, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> DiffArray:
    """Matrix product with matching (or absent) leading batch dimensions."""
    a, b = as_diff(a), as_diff(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), fn, "matmul")


def l2_normalize_lastdim(a) -> DiffArray:
    """Unit-normalize rows; all-zero rows map to zero with zero gradient."""
    a = as_diff(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, a.data / safe, 0.0)

    def fn(g):
        proj = np.sum(out * g, axis=-1, keepdims=True)
        return (np.where(norm > 0, (g - out * proj) / safe, 0.0),)

    return _node(out, (a,), fn, "l2_normalize")


def softmax_lastdim(a) -> DiffArray:
    a = as_diff(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _node(out, (a,), fn, "softmax")


def euclidean_distance_matrix(a, b) -> DiffArray:
    """Pairwise Euclidean distances between rows of a (P x D) and b (Q x D).

    The gradient at a zero distance is taken as zero.
    """
    a, b = as_diff(a), as_diff(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"distance matrix needs (P,D),(Q,D); got {a.shape}, {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def fn(g):
        w = np.divide(g, d, out=np.zeros_like(d), where=d > 0)
        ga = np.einsum("pq,pqd->pd", w, diff) if a.requires_grad else None
        gb = -np.einsum("pq,pqd->qd", w, diff) if b.requires_grad else None
        return ga, gb

    return _node(d, (a, b), fn, "euclidean_distance_matrix")


# ---------------------------------------------------------------- image ops

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Column matrix of shape (cin*k*k, n*ho*wo)."""
    n, cin = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * k * k, n * ho * wo)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _from_cnhw(y: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    return np.ascontiguousarray(y.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> DiffArray:
    """2-D cross-correlation, NCHW input and (Cout, Cin, k, k) kernel."""
    x, kernel = as_diff(x), as_diff(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    kmat = kernel.data.reshape(cout, -1)
    out2 = kmat @ cols
    if bias is not None:
        bias = as_diff(bias)
        out2 += bias.data[:, None]
    out = _from_cnhw(out2, n, ho, wo)

    def fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1:
            # input gradient = full correlation of g with the flipped, channel-swapped kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            full = flipped @ _im2col(_pad(g, k - 1), k, 1, ho + k - 1, wo + k - 1)
            full = full.reshape(cin, n, ho + k - 1, wo + k - 1)[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(full.transpose(1, 0, 2, 3))
        elif x.requires_grad:
            dcols = (kmat.T @ g2).reshape(cin, k, k, n, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        dcols[:, ki, kj].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=1) if bias.requires_grad else None)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, fn, "conv2d")


def maxpool2(x) -> DiffArray:
    """2x2 max-pooling with stride 2; ties route the gradient to the first
    element of the window in row-major order."""
    x = as_diff(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _node(out, (x,), fn, "maxpool2")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation matrix, half-pixel (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> DiffArray:
    x = as_diff(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _node(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = np.einsum("ih,nchw,jw->ncij", ry, x.data, rx, optimize=True)
    return _node(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ry, g, rx, optimize=True),), "bilinear_resize")


def bilinear_sample(fmap, points) -> DiffArray:
    """Sample a (C, H, W) map at (x, y) pixel coordinates; returns (P, C)."""
    fmap = as_diff(fmap)
    c, h, w = fmap.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xs, ys = pts[:, 0], pts[:, 1]
    bad = np.flatnonzero(~((xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"point {i} ({xs[i]:.3f}, {ys[i]:.3f}) outside map of size {w}x{h}")
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = xs - x0, ys - y0
    idx = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    wts = [(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay]
    d = fmap.data
    out = sum(d[:, yy, xx].T * ww[:, None] for (yy, xx), ww in zip(idx, wts))

    def fn(g):
        gm = np.zeros_like(d)
        for (yy, xx), ww in zip(idx, wts):
            np.add.at(gm, (slice(None), yy, xx), (g * ww[:, None]).T)
        return (gm,)

    return _node(out, (fmap,), fn, "bilinear_sample")


def depth_to_space(x, r: int) -> DiffArray:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r); channel index = c*r*r + dy*r + dx."""
    x = as_diff(x)
    n, crr, h, w = x.shape
    c = crr // (r * r)
    if c * r * r != crr:
        raise ShapeError(f"depth_to_space: {crr} channels not divisible by {r * r}")
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def fn(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _node(out, (x,), fn, "depth_to_space")
