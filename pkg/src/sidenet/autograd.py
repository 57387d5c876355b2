"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation that has at least one gradient-requiring input
appends a :class:`Node` to the active :class:`Tape`. Each node lists the arrays
it keeps alive for its backward pass, so the tape can report exactly how many
bytes of activations a training step retains. Parameters are never counted as
saved activations: they are resident anyway and show up in parameter bytes.

Saved-for-backward policy (only what the backward actually needs):

=====================  ==================================================
op                     retained arrays
=====================  ==================================================
add / sub / neg        nothing
mul                    the other operand of each grad-requiring input
scale (python scalar)  nothing
div                    divisor, plus the quotient when the divisor needs grad
matmul                 ``b`` if ``a`` needs grad, ``a`` if ``b`` needs grad
exp / tanh             output
log                    input
gelu                   input
softmax                output
log_softmax            output
max                    argmax indices
layernorm              normalized input; 1/std too if the input needs grad
batchnorm3d            normalized input; 1/std too if the input needs grad
conv_temporal_dw       input (only if the kernel needs grad); kernel
conv_temporal          input (only if the kernel needs grad); kernel
l2_normalize           output and norms
embedding              token ids
reshape / transpose /  nothing
getitem / concat /
shift_frames / sum /
mean / exact_mean
=====================  ==================================================

Arrays are counted by their root buffer (a view keeps its base alive), and a
buffer retained by several nodes is counted once.
"""

from __future__ import annotations

import contextlib
import math
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


class DimensionError(ContractError):
    pass


class Node:
    __slots__ = ("kind", "inputs", "saved", "backward_fn", "output")

    def __init__(self, kind, inputs, saved, backward_fn):
        self.kind = kind
        # constants are replaced by None so they never appear as tape inputs
        self.inputs = tuple(t if (t is not None and t.requires_grad) else None for t in inputs)
        self.saved = tuple(saved)
        self.backward_fn = backward_fn
        self.output = None

    def __repr__(self):
        return f"Node({self.kind})"


class Tape:
    """Ordered record of differentiable operations and their retained arrays."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.saved_bytes = 0
        self._seen: set[int] = set()

    def record(self, node: Node) -> None:
        for item in node.saved:
            arr = _root(item.data if isinstance(item, Tensor) else item)
            if id(arr) in self._seen or _is_param_buffer(arr):
                continue
            self._seen.add(id(arr))
            self.saved_bytes += arr.nbytes
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self._seen.clear()
        self.saved_bytes = 0

    def __len__(self):
        return len(self.nodes)


def _root(arr: np.ndarray) -> np.ndarray:
    # a view keeps its whole base alive
    while isinstance(arr.base, np.ndarray):
        arr = arr.base
    return arr


_PARAM_BUFFERS: "weakref.WeakValueDictionary[int, Parameter]" = weakref.WeakValueDictionary()


def _is_param_buffer(arr: np.ndarray) -> bool:
    owner = _PARAM_BUFFERS.get(id(arr))
    return owner is not None and _root(owner.data) is arr


class _State:
    def __init__(self):
        self.grad_enabled = True
        self.tape = Tape()


_STATE = _State()


def current_tape() -> Tape:
    return _STATE.tape


def grad_enabled() -> bool:
    return _STATE.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def no_grad_scope(fn: Callable, *args, **kwargs):
    """Run ``fn`` without recording anything on the tape."""
    with no_grad():
        return fn(*args, **kwargs)


@contextlib.contextmanager
def fresh_tape():
    """Install a new empty tape for the duration of the block."""
    prev = _STATE.tape
    tape = Tape()
    _STATE.tape = tape
    try:
        yield tape
    finally:
        _STATE.tape = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- array-like surface --
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_lift(o, self), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(_lift(o, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return tmax(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor owned by a model; never counted as a saved activation."""

    def __init__(self, data, requires_grad: bool = True, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype, name=name)
        _PARAM_BUFFERS[id(_root(self.data))] = self


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, kind: str, inputs: Sequence[Tensor], saved: Iterable, backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _STATE.grad_enabled and any(t.requires_grad for t in inputs):
        node = Node(kind, inputs, saved, backward_fn)
        out.requires_grad = True
        out.node = node
        node.output = out
        _STATE.tape.record(node)
    return out


def sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back onto ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- element-wise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return sum_to_shape(g, sa), sum_to_shape(g, sb)

    return _result(a.data + b.data, "add", (a, b), (), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return sum_to_shape(g, sa), sum_to_shape(-g, sb)

    return _result(a.data - b.data, "sub", (a, b), (), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), (), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar; nothing is retained."""
    c = float(c)
    return _result(a.data * a.dtype.type(c), "scale", (a,), (), lambda g: (g * g.dtype.type(c),))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    saved = []
    if a.requires_grad:
        saved.append(b)
    if b.requires_grad:
        saved.append(a)

    def bw(g):
        ga = sum_to_shape(g * bd, sa) if a.requires_grad else None
        gb = sum_to_shape(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, "mul", (a, b), saved, bw)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    bd = b.data
    out = a.data / bd
    saved = [b]
    if b.requires_grad:
        saved.append(out)

    def bw(g):
        ga = sum_to_shape(g / bd, sa) if a.requires_grad else None
        gb = sum_to_shape(-g * out / bd, sb) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), saved, bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, "exp", (x,), (out,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), "log", (x,), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, "tanh", (x,), (out,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        t_ = np.tanh(_GELU_C * (xd + 0.044715 * xd**3))
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t_) + 0.5 * xd * (1.0 - t_ * t_) * dinner),)

    return _result(out.astype(xd.dtype, copy=False), "gelu", (x,), (x,), bw)


# ---------------------------------------------------------------- linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    saved = []
    if a.requires_grad:
        saved.append(b)
    if b.requires_grad:
        saved.append(a)

    def bw(g):
        ga = sum_to_shape(g @ _swap(bd), ad.shape) if a.requires_grad else None
        gb = sum_to_shape(_swap(ad) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), saved, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]; a 1-D ``x`` is one row."""
    if x.ndim == 1:
        return linear(x.reshape(1, -1), w, b).reshape(-1)
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), "sum", (x,), (), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(np.mean(x.data, axis=axes, keepdims=keepdims), "mean", (x,), (), bw)


def exact_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Mean whose sum is exactly rounded (``math.fsum``), so the result is within
    one ulp of the true mean and independent of element order. Backward as :func:`mean`."""
    axes = _norm_axis(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    rows = np.transpose(x.data, keep + list(axes)).reshape(-1, math.prod(x.shape[a] for a in axes))
    count = rows.shape[1]
    vals = np.array([math.fsum(r) / count for r in rows.astype(np.float64).tolist()], dtype=np.float64)
    out_shape = tuple(1 if a in axes else n for a, n in enumerate(x.shape)) if keepdims else tuple(x.shape[a] for a in keep)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(vals.astype(x.dtype).reshape(out_shape), "exact_mean", (x,), (), bw)


def tmax(x: Tensor, axis: int = -1, keepdims=False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal index."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        ge = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), ge, axis=axis)
        return (gx,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _result(out, "max", (x,), (idx,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), (), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes).copy(), "transpose", (x,), (), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _is_basic(idx)

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.array(x.data[idx]), "getitem", (x,), (), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, (), bw)


def shift_frames(x: Tensor) -> Tensor:
    """Shift channel halves across the frame axis (axis 1 of [B, T, C]).

    Channels ``[0, ceil(C/2))`` read frame ``t-1``; channels ``[ceil(C/2), C)``
    read frame ``t+1``. Out-of-range frames read as zero.
    """
    if x.ndim != 3:
        raise DimensionError(f"shift_frames expects [B, T, C], got {x.shape}")
    c = x.shape[-1]
    half = (c + 1) // 2
    xd = x.data
    out = np.zeros_like(xd)
    out[:, 1:, :half] = xd[:, :-1, :half]
    out[:, :-1, half:] = xd[:, 1:, half:]

    def bw(g):
        gx = np.zeros_like(g)
        gx[:, :-1, :half] = g[:, 1:, :half]
        gx[:, 1:, half:] = g[:, :-1, half:]
        return (gx,)

    return _result(out, "shift_frames", (x,), (), bw)


# ---------------------------------------------------------------- neural-net primitives


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction. NaN propagates."""
    xd = x.data
    z = np.exp(xd - np.max(xd, axis=-1, keepdims=True))
    out = z / np.sum(z, axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _result(out, "softmax", (x,), (out,), bw)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - np.max(xd, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _result(out, "log_softmax", (x,), (out,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * rstd
    out = xhat * gamma.data + beta.data
    c = xd.shape[-1]

    def bw(g):
        gg = sum_to_shape(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = sum_to_shape(g, beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data
            gx = rstd * (gxh - gxh.sum(-1, keepdims=True) / c - xhat * (gxh * xhat).sum(-1, keepdims=True) / c)
        return gx, gg, gb

    saved = (xhat, rstd, gamma) if x.requires_grad else (xhat,)
    return _result(out, "layernorm", (x, gamma, beta), saved, bw)


class BatchNormState:
    """Running statistics of a batch-norm layer; arrays are updated in place."""

    def __init__(self, running_mean: np.ndarray, running_var: np.ndarray, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch norm over a channel-last [B, T, N, C] tensor, pooling B*T*N."""
    xd = x.data
    c = xd.shape[-1]
    axes = tuple(range(xd.ndim - 1))
    count = xd.size // c
    if training:
        if count == 1:
            raise ContractError("batchnorm3d in training mode needs more than one value per channel")
        mu = xd.mean(axis=axes)
        var = ((xd - mu) ** 2).mean(axis=axes)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * var * (count / (count - 1))
    else:
        mu, var = state.running_mean, state.running_var
    rstd = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = ((xd - mu) * rstd).astype(xd.dtype)
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = sum_to_shape(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = sum_to_shape(g, beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data
            if training:
                gx = rstd * (gxh - gxh.sum(axis=axes) / count - xhat * (gxh * xhat).sum(axis=axes) / count)
            else:
                gx = gxh * rstd
        return gx, gg, gb

    saved = (xhat, rstd, gamma) if x.requires_grad else (xhat,)
    return _result(out, "batchnorm3d", (x, gamma, beta), saved, bw)


def conv_temporal_depthwise(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel kernel-3 convolution along T of a [B, T, N, C] tensor, zero padding 1."""
    if x.ndim != 4 or w.shape != (x.shape[-1], 3):
        raise DimensionError(f"conv_temporal_depthwise expects x [B,T,N,C] and w [C,3], got {x.shape}, {w.shape}")
    xd, wd = x.data, w.data
    out = xd * wd[:, 1]
    out[:, 1:] += xd[:, :-1] * wd[:, 0]
    out[:, :-1] += xd[:, 1:] * wd[:, 2]
    saved = [w]
    if w.requires_grad:
        saved.append(x)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = g * wd[:, 1]
            gx[:, :-1] += g[:, 1:] * wd[:, 0]
            gx[:, 1:] += g[:, :-1] * wd[:, 2]
        if w.requires_grad:
            axes = (0, 1, 2)
            gw = np.stack(
                [
                    (g[:, 1:] * xd[:, :-1]).sum(axis=axes),
                    (g * xd).sum(axis=axes),
                    (g[:, :-1] * xd[:, 1:]).sum(axis=axes),
                ],
                axis=-1,
            )
        return gx, gw

    return _result(out, "conv_temporal_dw", (x, w), saved, bw)


def conv_temporal(x: Tensor, w: Tensor) -> Tensor:
    """Dense temporal convolution of [B, T, N, Cin] with w [k, Cin, Cout], stride 1, zero padding k//2."""
    if x.ndim != 4 or w.ndim != 3 or w.shape[1] != x.shape[-1] or w.shape[0] % 2 == 0:
        raise DimensionError(f"conv_temporal expects x [B,T,N,Cin] and odd-k w [k,Cin,Cout], got {x.shape}, {w.shape}")
    xd, wd = x.data, w.data
    k = wd.shape[0]
    pad = k // 2
    t = xd.shape[1]
    out = np.zeros(xd.shape[:3] + (wd.shape[2],), dtype=np.result_type(xd, wd))
    # tap j reads frame t + j - pad
    for j in range(k):
        lo, hi = max(0, pad - j), min(t, t + pad - j)
        if lo < hi:
            out[:, lo:hi] += xd[:, lo + j - pad : hi + j - pad] @ wd[j]
    saved = [w]
    if w.requires_grad:
        saved.append(x)

    def bw(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        for j in range(k):
            lo, hi = max(0, pad - j), min(t, t + pad - j)
            if lo >= hi:
                continue
            gj = g[:, lo:hi]
            src = slice(lo + j - pad, hi + j - pad)
            if gx is not None:
                gx[:, src] += gj @ wd[j].T
            if gw is not None:
                gw[j] = np.tensordot(xd[:, src], gj, axes=([0, 1, 2], [0, 1, 2]))
        return gx, gw

    return _result(out, "conv_temporal", (x, w), saved, bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    out = xd / n

    def bw(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / n,)

    return _result(out, "l2_normalize", (x,), (out, n), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def bw(g):
        gw = np.zeros(shape, dtype=g.dtype)
        np.add.at(gw, ids, g)
        return (gw,)

    return _result(weight.data[ids], "embedding", (weight,), (ids,), bw)


# ---------------------------------------------------------------- backward


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t is not None and t.node is not None and id(t.node) not in visited:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss.node is None:
        if not loss.requires_grad:
            raise ContractError("loss is not connected to the tape")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    grads: dict[int, np.ndarray] = {id(loss.node): seed}
    for node in reversed(_topo(loss.node)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if t is None or gi is None:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t.node)
                grads[key] = gi if key not in grads else grads[key] + gi
