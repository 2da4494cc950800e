"""numpy-backed tensors with reverse-mode automatic differentiation.

Tensors are immutable once created (parameters are re-assigned between
optimizer steps, never edited mid-graph).  Each primitive application is
recorded as a ComputationRecord; backward() replays the records in exact
reverse order of recording, once each.

Float32 is the default element type.  Gradient checks and invertibility
certification switch to float64 via use_dtype().

Broadcasting is deliberately narrow: shapes must match, or differ only by
leading batch axes / size-1 axes (e.g. [h] against [B,T,h], or [B,T,1]
against [B,T,h]).  Anything else raises ShapeError naming both shapes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, RankError, ShapeError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_SEQ_COUNTER = 0

# Test instrumentation: called with each ComputationRecord as backward replays it.
REPLAY_HOOK: Optional[Callable] = None


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default element type (float32/float64)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable recording; results inside carry no graph."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class ComputationRecord:
    """One recorded primitive application.

    pullback maps the output adjoint to a tuple of parent adjoints
    (None for parents that need no gradient).  backward() replays each
    reachable record exactly once, in reverse order of .seq.
    """

    __slots__ = ("op", "parents", "pullback", "out", "seq", "replays")

    def __init__(self, op: str, parents: tuple, pullback: Callable):
        global _SEQ_COUNTER
        _SEQ_COUNTER += 1
        self.op = op
        self.parents = parents
        self.pullback = pullback
        self.out = None
        self.seq = _SEQ_COUNTER
        self.replays = 0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ConfigError("wrap ndarray or scalars, not Tensor")
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.record: Optional[ComputationRecord] = None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def backward(self) -> None:
        backward(self)

    # operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def clear_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ----------------------------------------------------------------------
# graph plumbing


def _coerce(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def apply_primitive(data: np.ndarray, op: str, parents: Sequence, pullback: Callable) -> Tensor:
    """Wrap a computed ndarray as a graph node (the extension point for
    custom primitives such as the CTC lattice)."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        rec = ComputationRecord(op, parents, pullback)
        rec.out = out
        out.record = rec
    else:
        out.record = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dt into .grad of every reachable requires_grad tensor."""
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    records = []
    seen = set()
    stack = [loss]
    tensors = {id(loss): loss}
    while stack:
        t = stack.pop()
        rec = t.record
        if rec is None or id(rec) in seen:
            continue
        seen.add(id(rec))
        records.append(rec)
        for p in rec.parents:
            if p.requires_grad:
                tensors[id(p)] = p
                if p.record is not None and id(p.record) not in seen:
                    stack.append(p)
    records.sort(key=lambda r: r.seq, reverse=True)

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in records:
        g = flow.get(id(rec.out))
        if g is None:
            continue
        rec.replays += 1
        if REPLAY_HOOK is not None:
            REPLAY_HOOK(rec)
        partials = rec.pullback(g)
        for parent, pg in zip(rec.parents, partials):
            if pg is None or not parent.requires_grad:
                continue
            tensors[id(parent)] = parent
            prev = flow.get(id(parent))
            flow[id(parent)] = pg if prev is None else prev + pg
    for tid, g in flow.items():
        t = tensors.get(tid)
        if t is None or not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g


# ----------------------------------------------------------------------
# broadcasting policy


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    tail = long_[len(long_) - len(short):]
    return all(x == y or x == 1 or y == 1 for x, y in zip(short, tail))


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not alignable")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an adjoint back to the shape of the broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_binary(a, b, "add")
    out = a.data + b.data

    def pull(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_primitive(out, "add", (a, b), pull)


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_binary(a, b, "sub")
    out = a.data - b.data

    def pull(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_primitive(out, "sub", (a, b), pull)


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_binary(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def pull(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return apply_primitive(out, "mul", (a, b), pull)


def div(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_binary(a, b, "div")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def pull(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return apply_primitive(out, "div", (a, b), pull)


def neg(a) -> Tensor:
    a = _coerce(a)
    return apply_primitive(-a.data, "neg", (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _coerce(a)
    ad = a.data
    return apply_primitive(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.data)
    return apply_primitive(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return apply_primitive(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    ad = a.data
    return apply_primitive(np.log(ad), "log", (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    s = _sigmoid(a.data)
    return apply_primitive(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    """x * sigmoid(x); also the conformer's Swish."""
    a = _coerce(a)
    s = _sigmoid(a.data)
    out = a.data * s
    ad = a.data

    def pull(g):
        return (g * (s + ad * s * (1.0 - s)),)

    return apply_primitive(out, "silu", (a,), pull)


def glu(a, axis: int = -1) -> Tensor:
    """Gated linear unit: first half gated by sigmoid of second half."""
    a = _coerce(a)
    n = a.shape[axis]
    if n % 2 != 0:
        raise ShapeError(f"glu: axis extent {n} is odd (shape {a.shape})")
    half = n // 2
    lhs = narrow(a, axis, 0, half)
    gate = narrow(a, axis, half, half)
    return mul(lhs, sigmoid(gate))


# ----------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    out = a.data.reshape(shape)
    return apply_primitive(out, "reshape", (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _coerce(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return apply_primitive(out, "swapaxes", (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _coerce(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] outside axis {axis} of shape {a.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.ndim))
    out = a.data[idx].copy()
    shape = a.shape

    def pull(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return apply_primitive(out, "narrow", (a,), pull)


def take_row(a, index: int, axis: int = 0) -> Tensor:
    """Select one index along an axis, dropping that axis."""
    a = _coerce(a)
    axis = axis % a.ndim
    if not 0 <= index < a.shape[axis]:
        raise ShapeError(f"take_row: index {index} outside axis {axis} of shape {a.shape}")
    out = np.take(a.data, index, axis=axis).copy()
    shape = a.shape

    def pull(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = tuple(slice(None) if i != axis else index for i in range(len(shape)))
        full[sl] = g
        return (full,)

    return apply_primitive(out, "take_row", (a,), pull)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != base.ndim:
            raise ShapeError(f"concat: ranks differ ({base.shape} vs {t.shape})")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    axis_ = axis % base.ndim
    sizes = [t.shape[axis_] for t in tensors]

    def pull(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis_)
        return tuple(pieces)

    return apply_primitive(out, "concat", tuple(tensors), pull)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).astype(g.dtype, copy=True),)

    return apply_primitive(np.asarray(out), "sum", (a,), pull)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul: needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul: leading extents differ ({a.shape} @ {b.shape})")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtypes {a.dtype} and {b.dtype} differ")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def pull(g):
        da = np.matmul(g, np.swapaxes(bd, -1, -2))
        db = np.matmul(np.swapaxes(ad, -1, -2), g)
        if da.shape != ad.shape:  # b broadcast over a's batch dims: impossible here
            da = da.sum(axis=tuple(range(da.ndim - ad.ndim)))
        if db.shape != bd.shape:  # 2d weight applied to stacked batch
            db = db.sum(axis=tuple(range(db.ndim - bd.ndim)))
        return da, db

    return apply_primitive(out, "matmul", (a, b), pull)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the trailing feature axis."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ----------------------------------------------------------------------
# softmax family


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def pull(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return apply_primitive(out, "log_softmax", (a,), pull)


def masked_softmax(a, mask: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """Softmax with excluded positions; fully-masked rows yield zeros."""
    a = _coerce(a)
    x = a.data
    if mask is None:
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - m)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        neg = np.where(mask, x, -np.inf)
        m = np.max(neg, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(neg - m)
        e = np.where(mask, e, 0.0)
        s = e.sum(axis=axis, keepdims=True)
        y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def pull(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return apply_primitive(y, "masked_softmax", (a,), pull)


# ----------------------------------------------------------------------
# normalization


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    h = x.shape[-1] if x.ndim else 0
    if h == 0:
        raise ShapeError(f"layer_norm: empty trailing axis in shape {x.shape}")
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width ({h},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def pull(g):
        dxhat = g * gd
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        return dx, dgain, dbias

    return apply_primitive(out, "layer_norm", (x, gain, bias), pull)


class BnState:
    """Running statistics buffer for one batch-norm instance."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def astype(self, dtype) -> "BnState":
        out = BnState.__new__(BnState)
        out.mean = self.mean.astype(dtype)
        out.var = self.var.astype(dtype)
        return out


def batch_norm(x, gain, bias, state: BnState, training: bool,
               update_stats: bool = True, momentum: float = 0.1,
               eps: float = 1e-5, mask: Optional[np.ndarray] = None) -> Tensor:
    """Per-channel normalization over batch and time.

    In training mode the statistics come from the masked positions of the
    current batch (and optionally update the running buffers with the
    given momentum); in eval mode the running buffers are used.
    x is [B,T,C] or [T,C]; mask, if given, is the [B,T] / [T] validity map.
    """
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"batch_norm: gain/bias {gain.shape}/{bias.shape} do not match channels ({c},)")
    xd = x.data
    flat = xd.reshape(-1, c)
    if mask is not None:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
    else:
        sel = np.ones(flat.shape[0], dtype=bool)
    n = int(sel.sum())
    if training:
        if n == 0:
            raise ShapeError("batch_norm: no valid positions to take statistics from")
        mu = flat[sel].mean(axis=0)
        var = flat[sel].var(axis=0)
        if update_stats:
            state.mean = ((1.0 - momentum) * state.mean + momentum * mu).astype(state.mean.dtype)
            state.var = ((1.0 - momentum) * state.var + momentum * var).astype(state.var.dtype)
    else:
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def pull(g):
        gflat = g.reshape(-1, c)
        xhat_flat = xhat.reshape(-1, c)
        dgain = (g * xhat).reshape(-1, c).sum(axis=0)
        dbias = gflat.sum(axis=0)
        G = gflat * gd
        if not training:
            dx = (G * inv).reshape(xd.shape)
            return dx, dgain, dbias
        # batch statistics are functions of the selected rows only
        dvar = (G * (flat - mu)).sum(axis=0) * (-0.5) * inv ** 3
        dmu = (-G * inv).sum(axis=0)
        dx = G * inv
        dx[sel] += dmu / n + dvar * 2.0 * (flat[sel] - mu) / n
        return dx.reshape(xd.shape), dgain, dbias

    return apply_primitive(out, "batch_norm", (x, gain, bias), pull)


# ----------------------------------------------------------------------
# dropout


def dropout(x, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng stream")
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    m = keep.astype(x.dtype) * scale
    return mul(x, Tensor(m, dtype=x.dtype))


# ----------------------------------------------------------------------
# convolutions


def conv1d_depthwise(x, kernel) -> Tensor:
    """Per-channel 'same' convolution along time.

    x: [B,T,C] or [T,C]; kernel: [C,K] with K odd.
    """
    x, kernel = _coerce(x), _coerce(kernel)
    squeezed = x.ndim == 2
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 3:
        raise RankError(f"conv1d_depthwise: input rank must be 2 or 3, got {x.shape}")
    c = xd.shape[-1]
    if kernel.ndim != 2 or kernel.shape[0] != c:
        raise ShapeError(f"conv1d_depthwise: kernel {kernel.shape} does not match channels {c}")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"conv1d_depthwise: kernel width must be odd, got {k}")
    pad = (k - 1) // 2
    kd = kernel.data

    def corr(inp, ker):
        xp = np.pad(inp, ((0, 0), (pad, pad), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # [B,T,C,K]
        return np.einsum("btck,ck->btc", win, ker), win

    out, win = corr(xd, kd)

    def pull(g):
        g3 = g[None] if squeezed else g
        dk = np.einsum("btck,btc->ck", win, g3)
        dx = corr(g3, kd[:, ::-1])[0]
        return (dx[0] if squeezed else dx), dk

    return apply_primitive(out[0] if squeezed else out, "conv1d_depthwise", (x, kernel), pull)


def conv1d_pointwise(x, w, b=None) -> Tensor:
    """1x1 convolution over channels (a linear map at every timestep)."""
    return linear(x, w, b)


def conv_transpose1d_double(x, w, b=None) -> Tensor:
    """Stride-2 transposed convolution that exactly doubles the time axis.

    x: [B,T,Ci] or [T,Ci]; w: [Ci,Co,K] with K even; output [B,2T,Co].
    """
    x, w = _coerce(x), _coerce(w)
    squeezed = x.ndim == 2
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 3:
        raise RankError(f"conv_transpose1d_double: input rank must be 2 or 3, got {x.shape}")
    ci = xd.shape[-1]
    if w.ndim != 3 or w.shape[0] != ci:
        raise ShapeError(f"conv_transpose1d_double: weight {w.shape} does not match input {x.shape}")
    k = w.shape[2]
    if k % 2 != 0 or k < 2:
        raise ConfigError(f"conv_transpose1d_double: kernel width must be even >= 2, got {k}")
    pad = (k - 2) // 2
    bsz, t, _ = xd.shape
    co = w.shape[1]
    wd = w.data
    full_len = 2 * (t - 1) + k
    full = np.zeros((bsz, full_len, co), dtype=xd.dtype)
    for j in range(k):
        full[:, j:j + 2 * t - 1:2, :] += np.matmul(xd, wd[:, :, j])
    out = full[:, pad:pad + 2 * t, :]
    if b is not None:
        b = _coerce(b, w)
        out = out + b.data

    def pull(g):
        g3 = g[None] if squeezed else g
        gfull = np.zeros((bsz, full_len, co), dtype=g3.dtype)
        gfull[:, pad:pad + 2 * t, :] = g3
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        for j in range(k):
            gj = gfull[:, j:j + 2 * t - 1:2, :]           # [B,T,Co]
            dx += np.matmul(gj, wd[:, :, j].T)
            dw[:, :, j] = np.einsum("bti,bto->io", xd, gj)
        db = g3.sum(axis=(0, 1)) if b is not None else None
        return (dx[0] if squeezed else dx), dw, db

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return apply_primitive(out[0] if squeezed else out, "conv_transpose1d_double",
                               parents, lambda g: pull(g)[:2])
    return apply_primitive(out[0] if squeezed else out, "conv_transpose1d_double", parents, pull)


# ----------------------------------------------------------------------
# gathers


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row-gather: table [V,h], ids int array of any shape -> [..., h]."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    v, h = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"embedding: ids outside [0, {v})")
    out = table.data[ids]

    def pull(g):
        dt = np.zeros((v, h), dtype=g.dtype)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, h))
        return (dt,)

    return apply_primitive(out, "embedding", (table,), pull)


def rel_bias_lookup(table, idx: np.ndarray) -> Tensor:
    """Gather a [heads, n_offsets] bias table into [heads, Tq, Tk] logits."""
    table = _coerce(table)
    idx = np.asarray(idx)
    out = table.data[:, idx]
    heads = table.shape[0]

    def pull(g):
        dt = np.zeros(table.shape, dtype=g.dtype)
        rows = np.repeat(np.arange(heads), idx.size)
        cols = np.tile(idx.reshape(-1), heads)
        np.add.at(dt, (rows, cols), g.reshape(heads, -1).reshape(-1))
        return (dt,)

    return apply_primitive(out, "rel_bias_lookup", (table,), pull)
