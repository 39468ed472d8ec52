"""Small reverse-mode autodiff engine over numpy arrays.

Every differentiable op produces a new :class:`Tensor`. When any input
requires a gradient, the op appends a :class:`Node` to the graph with a
monotonically increasing sequence number; :func:`backward` replays the nodes
reachable from the loss in exact reverse order of recording.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class GraphError(RuntimeError):
    pass


def set_debug(flag: bool) -> None:
    """In debug mode every forward op checks its output for NaN/Inf."""
    _state.debug = bool(flag)


def _debug() -> bool:
    return getattr(_state, "debug", False)


class Node:
    __slots__ = ("seq", "op", "out_id", "parents", "vjp", "consumed")

    def __init__(self, op, out, parents, vjp):
        self.seq = next(_seq)
        self.op = op
        # id only: a back-reference would make every graph a reference cycle
        self.out_id = id(out)
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    """Dense array with optional participation in the gradient graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, inputs: Sequence["Tensor"] = ()) -> None:
        backward(self, inputs)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the other operand's precision in _binary
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _debug() and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op}: non-finite output from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._node = Node(op, out, tuple(parents), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(op, a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = as_tensor(a)
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b, shape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b, _ = _binary_operands("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands("mul", a, b)
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if ga else None,
                            _unbroadcast(g * ad, bd.shape) if gb else None))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make("reciprocal", out, (a,), lambda g: (-g * out * out,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    a, b, _ = _binary_operands("maximum", a, b)
    ad, bd = a.data, b.data
    take_a = ad >= bd
    return _make("maximum", np.maximum(ad, bd), (a, b),
                 lambda g: (_unbroadcast(np.where(take_a, g, 0), ad.shape),
                            _unbroadcast(np.where(take_a, 0, g), bd.shape)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make("relu", np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


def sign(x: Tensor) -> Tensor:
    # np.sign(0) == 0, which FGSM relies on
    return _make("sign", np.sign(x.data), (x,), lambda g: (np.zeros_like(g),))


def clip(x: Tensor, lo, hi) -> Tensor:
    lo_a = lo.data if isinstance(lo, Tensor) else lo
    hi_a = hi.data if isinstance(hi, Tensor) else hi
    inside = (x.data >= lo_a) & (x.data <= hi_a)
    return _make("clip", np.clip(x.data, lo_a, hi_a), (x,), lambda g: (g * inside,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.data.ndim)
    shape = x.shape
    kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make("sum", np.asarray(out), (x,),
                 lambda g: (np.broadcast_to(np.reshape(g, kshape), shape).copy(),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def amax(x: Tensor, axis: int) -> Tensor:
    """Max reduction over one axis; the gradient flows to the first argmax."""
    axis = axis % x.data.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("amax", out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def max_of_softmaxes(x: Tensor, noise: np.ndarray, tau: float):
    """Elementwise max over draws of softmax((x + noise) / tau).

    ``x`` is (N, D) and ``noise`` is (N, M, D). Returns ``(z, draws)`` where
    ``z`` is an (N, D) Tensor and ``draws`` the (N, M, D) array of softmax
    rows. Each image is handled separately so only the draws are kept.
    """
    n, d = x.shape
    if noise.ndim != 3 or noise.shape[0] != n or noise.shape[2] != d:
        raise ShapeError("max_of_softmaxes", x.shape, noise.shape)
    m = noise.shape[1]
    dt = x.dtype
    draws = np.empty(noise.shape, dtype=dt)
    arg = np.empty((n, d), dtype=np.intp)
    z = np.empty((n, d), dtype=dt)
    inv = dt.type(1.0 / tau)
    for i in range(n):
        u = draws[i]
        np.add(noise[i], x.data[i], out=u)
        u *= inv
        u -= u.max(axis=1, keepdims=True)
        np.exp(u, out=u)
        u /= u.sum(axis=1, keepdims=True)
        arg[i] = u.argmax(axis=0)
        z[i] = np.take_along_axis(u, arg[i][None], axis=0)[0]

    def vjp(g):
        gx = np.empty((n, d), dtype=g.dtype)
        for i in range(n):
            gz = g[i] * z[i]
            c = np.bincount(arg[i], weights=gz, minlength=m).astype(g.dtype)
            gx[i] = (gz - c @ draws[i]) * inv
        return (gx,)

    return _make("max_of_softmaxes", z, (x,), vjp), draws


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make("log_softmax", out, (x,),
                 lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b, _ = (a, b, None) if isinstance(a, Tensor) and isinstance(b, Tensor) else (
        as_tensor(a), as_tensor(b), None)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad
    return _make("matmul", ad @ bd, (a, b),
                 lambda g: (g @ bd.T if ga else None, ad.T @ g if gb else None))


# ---------------------------------------------------------------- convolution


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, c, kh, kw) @ (c*kh*kw, f)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    _, _, ho, wo = g.shape
    # accumulate in NHWC so each kernel offset adds a contiguous block
    gx = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=np.result_type(g, w))
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
    if c == 1:
        dcols = (g2 @ w.reshape(f, -1)).reshape(n, ho, wo, kh, kw)
        part = lambda i, j: dcols[..., i, j, None]
    else:
        wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # (kh, kw, f, c)
        part = lambda i, j: (g2 @ wt[i, j]).reshape(n, ho, wo, c)
    for i in range(kh):
        for j in range(kw):
            gx[:, i : i + stride * (ho - 1) + 1 : stride,
               j : j + stride * (wo - 1) + 1 : stride] += part(i, j)
    gx = gx[:, pad : pad + h, pad : pad + wd].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gx)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    f, c, kh, kw = w_shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    _, _, ho, wo = g.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, c * kh * kw)
    gw = g.transpose(1, 0, 2, 3).reshape(f, -1) @ cols
    return gw.reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over (N, C, H, W) with weights (F, C, kh, kw).

    ``padding`` is symmetric zero padding in pixels on every side.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if _conv_out(x.shape[2], w.shape[2], stride, padding) < 1 or \
            _conv_out(x.shape[3], w.shape[3], stride, padding) < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xd, wd = x.data, w.data
    gx, gw = x.requires_grad, w.requires_grad
    out = _conv_fwd(xd, wd, stride, padding)
    y = _make("conv2d", np.ascontiguousarray(out), (x, w),
              lambda g: (_conv_input_grad(g, wd, xd.shape, stride, padding) if gx else None,
                         _conv_weight_grad(xd, g, wd.shape, stride, padding) if gw else None))
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1, 1)))
    return y


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    Weights are laid out (C_in, C_out, kh, kw); output spatial size is
    ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    n, _, h, wdt = x.shape
    _, c_out, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wdt - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    out_shape = (n, c_out, ho, wo)
    xd, wd = x.data, w.data
    gx, gw = x.requires_grad, w.requires_grad
    out = _conv_input_grad(xd, wd, out_shape, stride, padding)
    y = _make("conv_transpose2d", out, (x, w),
              lambda g: (_conv_fwd(g, wd, stride, padding) if gx else None,
                         _conv_weight_grad(g, xd, wd.shape, stride, padding) if gw else None))
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1, 1)))
    return y


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first window slot."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError("maxpool2d", x.shape, (size, size))
    xd = x.data
    slots = [(i, j) for i in range(size) for j in range(size)]
    out = xd[:, :, 0::size, 0::size].copy()
    for i, j in slots[1:]:
        np.maximum(out, xd[:, :, i::size, j::size], out=out)

    def vjp(g):
        gx = np.zeros_like(xd, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in slots:
            hit = (xd[:, :, i::size, j::size] == out) & ~taken
            gx[:, :, i::size, j::size] = np.where(hit, g, 0)
            taken |= hit
        return (gx,)

    return _make("maxpool2d", out, (x,), vjp)


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Ordered record of the ops between a set of leaves and a loss."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen, stack, nodes = set(), [loss._node], []
        while stack:
            node = stack.pop()
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p._node for p in node.parents)
        nodes.sort(key=lambda nd: nd.seq)
        return cls(nodes)

    def leaves(self) -> list:
        out, seen = [], set()
        for node in self.nodes:
            for p in node.parents:
                if p._node is None and p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out


def backward(loss: Tensor, inputs: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Gradients accumulate into existing ``.grad`` buffers. Tensors passed in
    ``inputs`` that the loss does not depend on receive a zero gradient.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) + (0 if loss.grad is None else loss.grad)
            _zero_fill(inputs)
            return
        raise GraphError("loss is not connected to any tensor that requires grad")
    if loss._node.consumed:
        raise GraphError("backward already ran through this graph; rebuild it first")

    tape = Tape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        node.consumed = True
        if g is None:
            continue
        pgrads = node.vjp(g)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            if p._node is None:
                pg = np.asarray(pg, dtype=p.data.dtype)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node.vjp = None
    for leaf in tape.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    _zero_fill(inputs)


def _zero_fill(inputs):
    for t in inputs:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)
