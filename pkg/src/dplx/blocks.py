"""Reversible split-channel conformer blocks and the palindrome stack.

A block acts on a state split into two half-width streams (h1, h2):

    forward:  y1 = x1 + 0.5*FFN_a(x2)     reverse:  y2 = z2 - 0.5*FFN_b(z1)
              y2 = x2 + MHSA(y1)                    y1 = z1 - CNN(y2)
              z1 = y1 + CNN(y2)                     x2 = y2 - MHSA(y1)
              z2 = y2 + 0.5*FFN_b(z1)               x1 = y1 - 0.5*FFN_a(x2)

so the reverse form is the exact functional inverse of the forward form
with the same parameters.  The source-to-target map applies the first
half of the layers in reverse form and the second half in forward form;
the target-to-source map is its mirror, so the two cancel exactly.

Sub-module invocation letters: f = feed-forward, m = attention, c = conv.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BnState, Tensor


@dataclass
class RdcConfig:
    """Dimensions shared by every layer of one stack."""

    width: int = 64            # full state width h; streams use h/2
    heads: int = 4
    kernel: int = 7            # depthwise conv width, odd
    max_positions: int = 64    # relative-position clip range
    layers: int = 4            # must be even for the palindrome split
    ffn_dropout1: float = 0.0
    ffn_dropout2: float = 0.0
    attn_dropout: float = 0.0
    cnn_dropout: float = 0.0
    bn_momentum: float = 0.1   # EMA rate for batch-norm running stats

    def __post_init__(self):
        if self.width % 2 != 0:
            raise ConfigError(f"width must be even, got {self.width}")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError(
                f"bn_momentum must be in (0, 1], got {self.bn_momentum}")
        half = self.width // 2
        if half % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide half-width ({half})")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"conv kernel must be odd and positive, got {self.kernel}")
        if self.layers % 2 != 0 or self.layers < 2:
            raise ConfigError(f"layer count must be even and >= 2, got {self.layers}")
        if self.max_positions < 1:
            raise ConfigError(f"max_positions must be positive, got {self.max_positions}")

    @property
    def half(self) -> int:
        return self.width // 2


@dataclass
class Mode:
    """Execution mode for a pass through the stack."""

    training: bool = False
    update_bn: bool = True
    rng: Optional[np.random.Generator] = None


EVAL = Mode(training=False, update_bn=False, rng=None)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return T.parameter((rng.standard_normal(shape) * std).astype(dtype))


def _zeros(shape, dtype):
    return T.parameter(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype):
    return T.parameter(np.ones(shape, dtype=dtype))


class FfnParams:
    """Pre-norm feed-forward acting on one half-width stream (inner 4x)."""

    def __init__(self, cfg: RdcConfig, rng, dtype):
        c = cfg.half
        inner = 4 * c
        self.ln_g = _ones(c, dtype)
        self.ln_b = _zeros(c, dtype)
        self.w1 = _glorot(rng, c, inner, (c, inner), dtype)
        self.b1 = _zeros(inner, dtype)
        self.w2 = _glorot(rng, inner, c, (inner, c), dtype)
        self.b2 = _zeros(c, dtype)

    def named(self):
        return {"ln_g": self.ln_g, "ln_b": self.ln_b,
                "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class MhsaParams:
    """Pre-norm multi-head attention with a clipped relative-offset bias table."""

    def __init__(self, cfg: RdcConfig, rng, dtype):
        c = cfg.half
        self.ln_g = _ones(c, dtype)
        self.ln_b = _zeros(c, dtype)
        self.wq = _glorot(rng, c, c, (c, c), dtype)
        self.bq = _zeros(c, dtype)
        self.wk = _glorot(rng, c, c, (c, c), dtype)
        self.bk = _zeros(c, dtype)
        self.wv = _glorot(rng, c, c, (c, c), dtype)
        self.bv = _zeros(c, dtype)
        self.wo = _glorot(rng, c, c, (c, c), dtype)
        self.bo = _zeros(c, dtype)
        self.rel_bias = _zeros((cfg.heads, 2 * cfg.max_positions - 1), dtype)

    def named(self):
        return {"ln_g": self.ln_g, "ln_b": self.ln_b,
                "wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo,
                "rel_bias": self.rel_bias}


class CnnParams:
    """Pre-norm conv module: pointwise-double, GLU, depthwise, BN, swish, pointwise."""

    def __init__(self, cfg: RdcConfig, rng, dtype):
        c = cfg.half
        self.ln_g = _ones(c, dtype)
        self.ln_b = _zeros(c, dtype)
        self.pw1_w = _glorot(rng, c, 2 * c, (c, 2 * c), dtype)
        self.pw1_b = _zeros(2 * c, dtype)
        self.dw = T.parameter((rng.standard_normal((c, cfg.kernel))
                               * np.sqrt(1.0 / cfg.kernel)).astype(dtype))
        self.bn_g = _ones(c, dtype)
        self.bn_b = _zeros(c, dtype)
        self.bn = BnState(c, dtype=dtype)
        self.pw2_w = _glorot(rng, c, c, (c, c), dtype)
        self.pw2_b = _zeros(c, dtype)

    def named(self):
        return {"ln_g": self.ln_g, "ln_b": self.ln_b,
                "pw1_w": self.pw1_w, "pw1_b": self.pw1_b, "dw": self.dw,
                "bn_g": self.bn_g, "bn_b": self.bn_b,
                "pw2_w": self.pw2_w, "pw2_b": self.pw2_b}

    def buffers(self):
        return {"bn_mean": self.bn.mean, "bn_var": self.bn.var}


class RdcLayerParams:
    def __init__(self, cfg: RdcConfig, rng, dtype):
        self.ffn_a = FfnParams(cfg, rng, dtype)
        self.mhsa = MhsaParams(cfg, rng, dtype)
        self.cnn = CnnParams(cfg, rng, dtype)
        self.ffn_b = FfnParams(cfg, rng, dtype)

    def named(self):
        out = {}
        for part, obj in (("ffn_a", self.ffn_a), ("mhsa", self.mhsa),
                          ("cnn", self.cnn), ("ffn_b", self.ffn_b)):
            for k, v in obj.named().items():
                out[f"{part}.{k}"] = v
        return out

    def buffers(self):
        return {f"cnn.{k}": v for k, v in self.cnn.buffers().items()}


@dataclass
class CrossMaps:
    """Projections that let a layer's attention read a full-width memory."""

    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor

    @staticmethod
    def build(cfg: RdcConfig, rng, dtype) -> "CrossMaps":
        h, c = cfg.width, cfg.half
        return CrossMaps(
            k_w=_glorot(rng, h, c, (h, c), dtype), k_b=_zeros(c, dtype),
            v_w=_glorot(rng, h, c, (h, c), dtype), v_b=_zeros(c, dtype))

    def named(self):
        return {"k_w": self.k_w, "k_b": self.k_b, "v_w": self.v_w, "v_b": self.v_b}


@dataclass
class SplitState:
    """The two half-width streams plus the shared validity mask [B,T]."""

    h1: Tensor
    h2: Tensor
    mask: Optional[np.ndarray] = None

    @staticmethod
    def split(x: Tensor, mask: Optional[np.ndarray] = None) -> "SplitState":
        h = x.shape[-1]
        if h % 2 != 0:
            raise ShapeError(f"cannot split odd width {h} (shape {x.shape})")
        c = h // 2
        return SplitState(T.narrow(x, -1, 0, c), T.narrow(x, -1, c, c), mask)

    def merged(self) -> Tensor:
        return T.concat([self.h1, self.h2], axis=-1)


# ----------------------------------------------------------------------
# sub-modules


def ffn(x: Tensor, p: FfnParams, cfg: RdcConfig, mode: Mode) -> Tensor:
    h = T.layer_norm(x, p.ln_g, p.ln_b)
    h = T.silu(T.linear(h, p.w1, p.b1))
    h = T.dropout(h, cfg.ffn_dropout1, mode.training, mode.rng)
    h = T.linear(h, p.w2, p.b2)
    return T.dropout(h, cfg.ffn_dropout2, mode.training, mode.rng)


def _offsets(tq: int, tk: int, max_positions: int) -> np.ndarray:
    off = np.arange(tk)[None, :] - np.arange(tq)[:, None]
    off = np.clip(off, -(max_positions - 1), max_positions - 1)
    return off + max_positions - 1


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int,
                   kv_mask: Optional[np.ndarray], bias: Optional[Tensor]) -> Tensor:
    """Scaled dot-product attention over [B,T,c] tensors split into heads.

    bias, if given, is a [heads,Tq,Tk] logit offset; fully masked query
    rows produce zero context vectors.
    """
    b, tq, c = q.shape
    tk = k.shape[-2]
    if c % heads != 0:
        raise ShapeError(f"attention: width {c} not divisible by {heads} heads")
    d = c // heads

    def to_heads(t, tlen):
        return T.swapaxes(T.reshape(t, (b, tlen, heads, d)), 1, 2)

    qh = to_heads(q, tq)
    kh = to_heads(k, tk)
    vh = to_heads(v, tk)
    scores = T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(d))
    if bias is not None:
        scores = T.add(scores, bias)
    mask = None
    if kv_mask is not None:
        mask = np.asarray(kv_mask, dtype=bool)[:, None, None, :]
    attn = T.masked_softmax(scores, mask, axis=-1)
    ctx = T.matmul(attn, vh)
    return T.reshape(T.swapaxes(ctx, 1, 2), (b, tq, c))


def mhsa(x: Tensor, p: MhsaParams, cfg: RdcConfig, mode: Mode,
         mask: Optional[np.ndarray] = None,
         memory: Optional[Tensor] = None,
         memory_mask: Optional[np.ndarray] = None,
         cross: Optional[CrossMaps] = None) -> Tensor:
    """Self-attention on one stream, or cross-attention onto a memory
    sequence when cross maps are supplied (the diffusion conditioner)."""
    h = T.layer_norm(x, p.ln_g, p.ln_b)
    q = T.linear(h, p.wq, p.bq)
    if cross is not None:
        if memory is None:
            raise ConfigError("cross-attention requested without a memory sequence")
        k = T.linear(memory, cross.k_w, cross.k_b)
        v = T.linear(memory, cross.v_w, cross.v_b)
        bias = None
        kv_mask = memory_mask
    else:
        k = T.linear(h, p.wk, p.bk)
        v = T.linear(h, p.wv, p.bv)
        tq = x.shape[-2]
        bias = T.rel_bias_lookup(p.rel_bias, _offsets(tq, tq, cfg.max_positions))
        kv_mask = mask
    ctx = attention_core(q, k, v, cfg.heads, kv_mask, bias)
    out = T.linear(ctx, p.wo, p.bo)
    return T.dropout(out, cfg.attn_dropout, mode.training, mode.rng)


def cnn(x: Tensor, p: CnnParams, cfg: RdcConfig, mode: Mode,
        mask: Optional[np.ndarray] = None) -> Tensor:
    h = T.layer_norm(x, p.ln_g, p.ln_b)
    h = T.glu(T.conv1d_pointwise(h, p.pw1_w, p.pw1_b))
    if mask is not None:
        h = T.mul(h, Tensor(mask[..., None].astype(h.dtype.type), dtype=h.dtype))
    h = T.conv1d_depthwise(h, p.dw)
    h = T.batch_norm(h, p.bn_g, p.bn_b, p.bn, training=mode.training,
                     update_stats=mode.training and mode.update_bn,
                     momentum=cfg.bn_momentum, mask=mask)
    h = T.silu(h)
    h = T.conv1d_pointwise(h, p.pw2_w, p.pw2_b)
    return T.dropout(h, cfg.cnn_dropout, mode.training, mode.rng)


# ----------------------------------------------------------------------
# blocks


def block_forward(s: SplitState, lay: RdcLayerParams, cfg: RdcConfig, mode: Mode,
                  trace: Optional[list] = None,
                  memory: Optional[Tensor] = None,
                  memory_mask: Optional[np.ndarray] = None,
                  cross: Optional[CrossMaps] = None) -> SplitState:
    y1 = T.add(s.h1, T.mul(ffn(s.h2, lay.ffn_a, cfg, mode), 0.5))
    y2 = T.add(s.h2, mhsa(y1, lay.mhsa, cfg, mode, mask=s.mask,
                          memory=memory, memory_mask=memory_mask, cross=cross))
    z1 = T.add(y1, cnn(y2, lay.cnn, cfg, mode, mask=s.mask))
    z2 = T.add(y2, T.mul(ffn(z1, lay.ffn_b, cfg, mode), 0.5))
    if trace is not None:
        trace.extend("fmcf")
    return SplitState(z1, z2, s.mask)


def block_reverse(s: SplitState, lay: RdcLayerParams, cfg: RdcConfig, mode: Mode,
                  trace: Optional[list] = None,
                  memory: Optional[Tensor] = None,
                  memory_mask: Optional[np.ndarray] = None,
                  cross: Optional[CrossMaps] = None) -> SplitState:
    """Exact inverse of block_forward with the same parameters."""
    y2 = T.sub(s.h2, T.mul(ffn(s.h1, lay.ffn_b, cfg, mode), 0.5))
    y1 = T.sub(s.h1, cnn(y2, lay.cnn, cfg, mode, mask=s.mask))
    x2 = T.sub(y2, mhsa(y1, lay.mhsa, cfg, mode, mask=s.mask,
                        memory=memory, memory_mask=memory_mask, cross=cross))
    x1 = T.sub(y1, T.mul(ffn(x2, lay.ffn_a, cfg, mode), 0.5))
    if trace is not None:
        trace.extend("fcmf")
    return SplitState(x1, x2, s.mask)


# ----------------------------------------------------------------------
# palindrome stack


def _check_stack(layers) -> int:
    n = len(layers)
    if n % 2 != 0 or n < 2:
        raise ConfigError(f"stack needs an even layer count >= 2, got {n}")
    return n


def stack_forward(s: SplitState, layers, cfg: RdcConfig, mode: Mode,
                  trace: Optional[list] = None, collect: bool = False,
                  cross_list=None, memory: Optional[Tensor] = None,
                  memory_mask: Optional[np.ndarray] = None):
    """Source-to-target map: layers 1..L/2 in reverse form, then L/2+1..L
    in forward form.  Returns (state, per-application merged outputs)."""
    n = _check_stack(layers)
    states = []
    for i in range(n):
        fn = block_reverse if i < n // 2 else block_forward
        cross = cross_list[i] if cross_list is not None else None
        s = fn(s, layers[i], cfg, mode, trace=trace,
               memory=memory, memory_mask=memory_mask, cross=cross)
        if collect:
            states.append(s.merged())
    return s, states


def stack_reverse(s: SplitState, layers, cfg: RdcConfig, mode: Mode,
                  trace: Optional[list] = None, collect: bool = False,
                  cross_list=None, memory: Optional[Tensor] = None,
                  memory_mask: Optional[np.ndarray] = None):
    """Target-to-source map, the exact inverse of stack_forward."""
    n = _check_stack(layers)
    states = []
    for i in range(n - 1, -1, -1):
        fn = block_reverse if i >= n // 2 else block_forward
        cross = cross_list[i] if cross_list is not None else None
        s = fn(s, layers[i], cfg, mode, trace=trace,
               memory=memory, memory_mask=memory_mask, cross=cross)
        if collect:
            states.append(s.merged())
    return s, states


def palindrome_trace(layers: int) -> str:
    """Expected sub-module letter sequence for either direction."""
    if layers % 2 != 0 or layers < 2:
        raise ConfigError(f"layer count must be even and >= 2, got {layers}")
    return "fcmf" * (layers // 2) + "fmcf" * (layers // 2)


def upsample_double(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Learned stride-2 transposed convolution doubling the time axis."""
    return T.conv_transpose1d_double(x, w, b)
