"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive computes its forward value eagerly and, when a :class:`Tape`
is active and at least one input requires a gradient, appends a node holding
the inputs and a vector-Jacobian product closure.  :func:`backward` replays
the tape in reverse.

Tensors default to float32.  float64 inputs are preserved so that gradient
checks can run free of single-precision rounding noise.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded in execution order, which is a valid topological order.
    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tensor:
    """A dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "node", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        explicit64 = isinstance(data, (np.ndarray, np.float64)) and data.dtype == np.float64
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not explicit64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    # -- conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _lift_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, vjp)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class Gradients:
    """Leaf gradients returned by :func:`backward`.

    Indexing with a leaf tensor that the output does not depend on returns
    zeros of the leaf's shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._leaves.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return np.asarray(g, dtype=t.dtype).reshape(t.shape)

    def __contains__(self, t: Tensor) -> bool:
        return self._leaves.get(id(t)) is t

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: Tape, output: Tensor) -> Gradients:
    """Gradients of the scalar ``output`` w.r.t. every leaf on ``tape``."""
    if output.data.size != 1:
        raise ValueError(f"backward requires a single-element output, got shape {output.shape}")
    seed = np.ones_like(output.data)
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if output.node is None:
        if output.requires_grad:
            leaf_grads[id(output)] = seed
            leaves[id(output)] = output
        return Gradients(leaf_grads, leaves)

    pending: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                leaves[key] = inp
                target = leaf_grads
            else:
                target = pending
            prev = target.get(key)
            target[key] = gi if prev is None else prev + gi
    return Gradients(leaf_grads, leaves)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    """Square root whose gradient at zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * g / safe, 0).astype(out.dtype),)

    return _emit("sqrt", out, (a,), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("only constant exponents are supported")
    ad = a.data
    return _emit("pow", ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = (0.5 * (np.tanh(0.5 * a.data) + 1)).astype(a.dtype)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(a.dtype)
    sig = (0.5 * (np.tanh(0.5 * x) + 1)).astype(a.dtype)
    return _emit("softplus", out, (a,), lambda g: (g * sig,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes strictly inside, zero elsewhere."""
    a = as_tensor(a)
    x = a.data
    mask = np.ones(x.shape, dtype=bool)
    out = x
    if lo is not None:
        mask &= x > lo
        out = np.maximum(out, lo)
    if hi is not None:
        mask &= x < hi
        out = np.minimum(out, hi)
    return _emit("clamp", out.astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit("getitem", a.data[idx], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _emit("stack", out, ts, vjp)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    a, b = _lift_pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# indexed ops
# ---------------------------------------------------------------------------


def _scatter_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    tail = values.shape[1:]
    cols = values.reshape(len(values), -1)
    out = np.empty((n, cols.shape[1]), dtype=values.dtype)
    for k in range(cols.shape[1]):
        out[:, k] = np.bincount(index, weights=cols[:, k], minlength=n)
    return out.reshape((n,) + tail)


def gather(a, index: np.ndarray) -> Tensor:
    """Rows of ``a`` selected by an integer array (axis 0)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    return _emit("gather", a.data[index], (a,), lambda g: (_scatter_rows(g, index, n),))


def scatter_add(values, index: np.ndarray, size: int) -> Tensor:
    """Sum rows of ``values`` into ``size`` buckets given by ``index``."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.intp)
    out = _scatter_rows(values.data, index, size)
    return _emit("scatter_add", out, (values,), lambda g: (g[index],))


def segment_cumsum_exclusive(a, segment_ids: np.ndarray) -> Tensor:
    """Exclusive running sum of a 1-D tensor within contiguous segments.

    ``segment_ids`` must be non-decreasing.  Accumulation is done in float64
    so long sequences do not lose precision; the result keeps ``a``'s dtype.
    """
    a = as_tensor(a)
    seg = np.asarray(segment_ids)
    x = a.data.astype(np.float64)
    n = x.shape[0]
    if n == 0:
        return _emit("segscan", a.data.copy(), (a,), lambda g: (g,))
    is_start = np.empty(n, dtype=bool)
    is_start[0] = True
    is_start[1:] = seg[1:] != seg[:-1]
    start_idx = np.maximum.accumulate(np.where(is_start, np.arange(n), 0))
    is_end = np.empty(n, dtype=bool)
    is_end[-1] = True
    is_end[:-1] = is_start[1:]
    end_idx = np.minimum.accumulate(np.where(is_end, np.arange(n), n - 1)[::-1])[::-1]

    excl = np.cumsum(x) - x
    out = (excl - excl[start_idx]).astype(a.dtype)

    def vjp(g):
        gd = g.astype(np.float64)
        suffix = np.cumsum(gd[::-1])[::-1]  # sum_{j >= k}
        after = suffix - gd  # sum_{j > k}
        return ((after - after[end_idx]).astype(g.dtype),)

    return _emit("segscan", out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution, pooling, sampling
# ---------------------------------------------------------------------------


def depthwise_conv3x3(x, kernels) -> Tensor:
    """Per-channel 3x3 correlation, zero padding 1, stride 1.

    ``x`` is [C, H, W]; ``kernels`` is [C, 3, 3].
    """
    x, kernels = _lift_pair(x, kernels)
    xd, kd = x.data, kernels.data
    if xd.ndim != 3 or kd.shape != (xd.shape[0], 3, 3):
        raise ValueError(f"depthwise kernels {kd.shape} do not match input {xd.shape}")
    c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(xd, dtype=np.result_type(xd, kd))
    for dy in range(3):
        for dx in range(3):
            out += kd[:, dy, dx, None, None] * xp[:, dy : dy + h, dx : dx + w]

    def vjp(g):
        gx = None
        gk = None
        if x.requires_grad:
            gp = np.zeros((c, h + 2, w + 2), dtype=g.dtype)
            for dy in range(3):
                for dx in range(3):
                    gp[:, dy : dy + h, dx : dx + w] += kd[:, dy, dx, None, None] * g
            gx = gp[:, 1:-1, 1:-1]
        if kernels.requires_grad:
            gk = np.empty((c, 3, 3), dtype=g.dtype)
            for dy in range(3):
                for dx in range(3):
                    gk[:, dy, dx] = np.einsum("chw,chw->c", g, xp[:, dy : dy + h, dx : dx + w])
        return gx, gk

    return _emit("dwconv3x3", out, (x, kernels), vjp)


def pointwise_conv(x, weights, bias=None) -> Tensor:
    """1x1 convolution: ``weights`` [C', C] mixes the channels of ``x`` [C, H, W]."""
    x = as_tensor(x)
    weights = as_tensor(weights, like=x)
    c, h, w = x.shape
    if weights.ndim != 2 or weights.shape[1] != c:
        raise ValueError(f"pointwise weights {weights.shape} do not match {c} input channels")
    out = reshape(matmul(weights, reshape(x, (c, h * w))), (weights.shape[0], h, w))
    if bias is not None:
        out = out + reshape(as_tensor(bias, like=x), (-1, 1, 1))
    return out


def depthwise_separable_conv(x, dw_kernels, pw_kernels, bias=None) -> Tensor:
    return pointwise_conv(depthwise_conv3x3(x, dw_kernels), pw_kernels, bias)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes of [C, H, W]."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial size, got {h}x{w}")
    return mean(reshape(x, (c, h // 2, 2, w // 2, 2)), axis=(2, 4))


def global_avg_pool(x) -> Tensor:
    return mean(x, axis=(1, 2))


def bilinear_sample(featmap, uv) -> Tensor:
    """Sample ``featmap`` [C, h, w] at normalized coordinates.

    ``uv`` is [2] or [N, 2] with ``u`` horizontal and ``v`` vertical;
    (0, 0) hits the centre of texel (0, 0) and (1, 1) the centre of texel
    (h-1, w-1).  Coordinates are clamped into the unit square first.
    Returns [C] or [N, C].
    """
    featmap = as_tensor(featmap)
    uv = as_tensor(uv, like=featmap)
    single = uv.ndim == 1
    if single:
        uv = reshape(uv, (1, 2))
    uvc = clamp(uv, 0.0, 1.0)
    out = _bilinear_core(featmap, uvc)
    return reshape(out, (featmap.shape[0],)) if single else out


def _bilinear_core(featmap: Tensor, uv: Tensor) -> Tensor:
    f = featmap.data
    _, h, w = f.shape
    # clamp leaves exact 0/1 values; np.clip guards tiny float excursions
    x = np.clip(uv.data[:, 0], 0, 1) * (w - 1)
    y = np.clip(uv.data[:, 1], 0, 1) * (h - 1)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0).astype(f.dtype)
    fy = (y - y0).astype(f.dtype)
    f00, f01 = f[:, y0, x0].T, f[:, y0, x1].T  # [N, C]
    f10, f11 = f[:, y1, x0].T, f[:, y1, x1].T
    wx, wy = fx[:, None], fy[:, None]
    out = f00 * (1 - wx) * (1 - wy) + f01 * wx * (1 - wy) + f10 * (1 - wx) * wy + f11 * wx * wy

    def vjp(g):
        gf = guv = None
        if featmap.requires_grad:
            gflat = np.zeros((f.shape[0], h * w), dtype=g.dtype)
            for yy, xx, wgt in (
                (y0, x0, (1 - wx) * (1 - wy)),
                (y0, x1, wx * (1 - wy)),
                (y1, x0, (1 - wx) * wy),
                (y1, x1, wx * wy),
            ):
                flat = yy * w + xx
                contrib = g * wgt  # [N, C]
                for ch in range(f.shape[0]):
                    gflat[ch] += np.bincount(flat, weights=contrib[:, ch], minlength=h * w).astype(g.dtype)
            gf = gflat.reshape(f.shape)
        if uv.requires_grad:
            dfx = (f01 - f00) * (1 - wy) + (f11 - f10) * wy
            dfy = (f10 - f00) * (1 - wx) + (f11 - f01) * wx
            gu = (g * dfx).sum(axis=1) * (w - 1)
            gv = (g * dfy).sum(axis=1) * (h - 1)
            guv = np.stack([gu, gv], axis=1).astype(g.dtype)
        return gf, guv

    return _emit("bilinear", out, (featmap, uv), vjp)
