"""Dense tensors with tape-style reverse-mode autodiff.

Every op builds its output through :func:`make_node`, which records the
parents and a closure mapping the upstream gradient to one gradient per
parent. :class:`Graph` linearises the recorded ops in topological order and
:func:`backward` replays them in reverse, visiting each exactly once.

Layout is row-major ``[N, C, H, W]``. Broadcasting is limited to Python
scalars; per-channel bias is a dedicated op (:func:`add_bias`).
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

DEBUG = os.environ.get("EARLYFUSION_DEBUG", "") not in ("", "0")

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar():
    raise UsageError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    The graph edge is only recorded when at least one parent needs a gradient,
    so pure-data computations never grow a tape.
    """
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite output from {op}")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


class Graph:
    """Ops reachable from an output, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    @property
    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n.backward_fn is not None]

    def backward(self, seed: np.ndarray) -> None:
        out = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    Graph.from_output(loss).backward(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# elementwise


def _binary_check(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and b.size != 1:
        raise ShapeError(f"{name}: shapes {list(a.shape)} and {list(b.shape)} do not match")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return make_node(a.data + b, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _binary_check(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return make_node(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    a = as_tensor(a)
    _binary_check(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return make_node(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    _binary_check(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, b.shape)), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return make_node(a.data / b, (a,), lambda g: (g / b,), "div_scalar")
    _binary_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_node(out, (a, b), lambda g: (g / bd, _unbroadcast(-g * out / bd, b.shape)), "div")


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return make_node(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise UsageError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != x.size:
        raise ShapeError(f"cannot reshape {list(x.shape)} ({x.size} elements) to {list(new_shape)}")
    old = x.shape
    return make_node(x.data.reshape(new_shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 4 or len(b.shape) != 4:
        raise ShapeError("concat_channels expects [N,C,H,W] tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: {list(a.shape)} vs {list(b.shape)}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_node(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_node(x.data[:, start:stop].copy(), (x,), bw, "slice")


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    src = x.dtype
    return make_node(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "cast")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 (``[N,F]`` or ``[N,C,H,W]``)."""
    if len(b.shape) != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias {list(b.shape)} does not match axis 1 of {list(x.shape)}")
    view = (1, -1) + (1,) * (len(x.shape) - 2)
    sum_axes = tuple(i for i in range(len(x.shape)) if i != 1)
    return make_node(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=sum_axes)), "bias")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_bias(matmul(x, w), b)


# ---------------------------------------------------------------------------
# convolutions


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix [N, C*kh*kw, oh*ow] of a zero-padded input."""
    n, c = x.shape[:2]
    xp = _pad(x, pad)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into an image of ``shape``."""
    n, c, h, w = shape
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w]


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int, cin_axis: int, name: str):
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ShapeError(f"{name}: expected 4-d input and weight")
    if stride < 1 or pad < 0:
        raise ShapeError(f"{name}: invalid stride {stride} / pad {pad}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, weight expects {w.shape[cin_axis]}")
    if b is not None and b.shape != (w.shape[1 - cin_axis],):
        raise ShapeError(f"{name}: bias shape {list(b.shape)} does not match weight {list(w.shape)}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; ``w`` is ``[Cout, Cin, kh, kw]``."""
    _check_conv_args(x, w, b, stride, pad, 1, "conv2d")
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    n, cout = x.shape[0], w.shape[0]
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    cols = _im2col(x.data, kh, kw, stride, pad, oh, ow)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, oh, ow)
    x_shape, w_shape = x.shape, w.shape

    def bw(g):
        g2 = g.reshape(n, cout, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(np.matmul(wmat.T, g2), x_shape, kh, kw, stride, pad, oh, ow)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        if b is not None:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    return make_node(np.ascontiguousarray(out), parents, bw, "conv2d")


def transpose_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is ``[Cin, Cout, kh, kw]``.

    Output size is ``(H - 1) * stride - 2 * pad + kh``.
    """
    _check_conv_args(x, w, b, stride, pad, 0, "transpose_conv2d")
    n, _, h, wd = x.shape
    cout, kh, kw = w.shape[1:]
    oh, ow = (h - 1) * stride - 2 * pad + kh, (wd - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ShapeError(f"transpose_conv2d: output geometry {oh}x{ow} is empty")
    cin = x.shape[1]
    xmat = x.data.reshape(n, cin, h * wd)
    wmat = w.data.reshape(cin, -1)  # [Cin, Cout*kh*kw]
    out = _col2im(np.matmul(wmat.T, xmat), (n, cout, oh, ow), kh, kw, stride, pad, h, wd)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad or w.requires_grad:
            cols = _im2col(g, kh, kw, stride, pad, h, wd)  # [N, Cout*kh*kw, H*W]
            if x.requires_grad:
                gx = np.matmul(wmat, cols).reshape(x.shape)
            if w.requires_grad:
                gw = np.matmul(xmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    return make_node(np.ascontiguousarray(out), parents, bw, "transpose_conv2d")


# ---------------------------------------------------------------------------
# resampling


def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of ``[N, C, h, w]`` to ``[N, C, out_h, out_w]``."""
    ry = _bilinear_matrix(out_h, x.shape[2], x.dtype)
    rx = _bilinear_matrix(out_w, x.shape[3], x.dtype)
    out = np.einsum("yh,nchw,xw->ncyx", ry, x.data, rx, optimize=True)
    return make_node(out, (x,), lambda g: (np.einsum("yh,ncyx,xw->nchw", ry, g, rx, optimize=True),), "resize")


# ---------------------------------------------------------------------------
# verification


def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``. ``coords`` restricts
    the check to a subset of flat indices (useful for large parameter tensors);
    the default checks every coordinate. ``x`` is perturbed in place and
    restored afterwards.
    """
    if x.dtype != np.float64:
        raise UsageError("gradient checks must run in float64")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data.sum())
        flat[i] = orig - h
        fm = float(f(x).data.sum())
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
