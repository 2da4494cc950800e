"""The duplex translation model: one reversible stack shared by both
directions, plus per-side encoders, upsamplers, and output heads.

The denoising path reuses the same stack with attention redirected onto
a clean-memory sequence; its extra parameters (time embedding, memory
projections, epsilon output maps) are the parts frozen in the final
training stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import (CrossMaps, Mode, RdcConfig, RdcLayerParams, SplitState,
                     stack_forward, stack_reverse)
from .errors import ConfigError, DataError
from .rng import RngHub
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab: int = 100
    width: int = 64
    layers: int = 4
    heads: int = 4
    kernel: int = 7
    upsample_kernel: int = 4
    max_len: int = 24
    position_encoding: str = "bidirectional"   # or "sinusoidal", "none"
    encoders_trainable: bool = True
    ffn_dropout1: float = 0.0
    ffn_dropout2: float = 0.0
    attn_dropout: float = 0.0
    cnn_dropout: float = 0.0
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if self.upsample_kernel % 2 != 0 or self.upsample_kernel < 2:
            raise ConfigError(
                f"upsample_kernel must be even and >= 2, got {self.upsample_kernel}")
        if self.position_encoding not in ("bidirectional", "sinusoidal", "none"):
            raise ConfigError(f"unknown position_encoding {self.position_encoding!r}")
        self.rdc()  # validates width/heads/kernel/layers

    def rdc(self) -> RdcConfig:
        return RdcConfig(
            width=self.width, heads=self.heads, kernel=self.kernel,
            max_positions=2 * self.max_len, layers=self.layers,
            ffn_dropout1=self.ffn_dropout1, ffn_dropout2=self.ffn_dropout2,
            attn_dropout=self.attn_dropout, cnn_dropout=self.cnn_dropout,
            bn_momentum=self.bn_momentum)

    @property
    def blank(self) -> int:
        return self.vocab


def sinusoidal_table(length: int, width: int, dtype) -> np.ndarray:
    """Fixed sin/cos position features, one row per position."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange((width + 1) // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / width)
    out = np.zeros((length, width), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : width // 2])
    return out.astype(dtype)


def position_features(model: "DuplexModel", t2: int,
                      mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """Position features for a length-t2 frame sequence, or None.

    The bidirectional scheme interleaves distance-from-start rows (even
    channels) with distance-from-end rows (odd channels), so a frame k
    steps from either boundary looks the same at every sequence length.
    The end-side distance needs each row's valid length, read off `mask`;
    with no mask all t2 frames count.  Padding frames get start features
    only, matching the one-sided scheme.
    """
    table = model.posenc
    if table is None:
        return None
    if model.cfg.position_encoding != "bidirectional":
        return table[:t2]
    if mask is None:
        lens = np.array([t2])
    else:
        lens = np.atleast_2d(np.asarray(mask, dtype=bool)).sum(axis=1)
    out = np.zeros((lens.shape[0], t2, model.cfg.width), dtype=table.dtype)
    out[:, :, 0::2] = table[:t2][None]
    d = lens[:, None] - 1 - np.arange(t2)[None, :]
    out[:, :, 1::2] = np.where((d >= 0)[..., None], table[np.clip(d, 0, None)], 0.0)
    return out[0] if mask is None else out


class Embedding:
    """Stand-in encoder: a learned (or frozen) V x h table, row-gathered."""

    def __init__(self, vocab: int, width: int, rng, dtype, trainable: bool = True):
        self.table = T.parameter(rng.standard_normal((vocab, width)).astype(dtype))
        self.trainable = trainable

    def named(self):
        return {"table": self.table}


class UpsampleParams:
    def __init__(self, width: int, kernel: int, rng, dtype):
        std = np.sqrt(2.0 / (width + width))
        self.w = T.parameter((rng.standard_normal((width, width, kernel)) * std).astype(dtype))
        self.b = T.parameter(np.zeros(width, dtype=dtype))

    def named(self):
        return {"w": self.w, "b": self.b}


class Head:
    def __init__(self, width: int, classes: int, rng, dtype):
        std = np.sqrt(2.0 / (width + classes))
        self.w = T.parameter((rng.standard_normal((width, classes)) * std).astype(dtype))
        self.b = T.parameter(np.zeros(classes, dtype=dtype))

    def named(self):
        return {"w": self.w, "b": self.b}


class DuplexModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else T.get_default_dtype()
        self.cfg = cfg
        self.rdc = cfg.rdc()
        h = cfg.width
        self.enc_x = Embedding(cfg.vocab, h, rng, dtype, cfg.encoders_trainable)
        self.enc_y = Embedding(cfg.vocab, h, rng, dtype, cfg.encoders_trainable)
        self.up_x = UpsampleParams(h, cfg.upsample_kernel, rng, dtype)
        self.up_y = UpsampleParams(h, cfg.upsample_kernel, rng, dtype)
        self.layers = [RdcLayerParams(self.rdc, rng, dtype) for _ in range(cfg.layers)]
        self.cross_fwd = [CrossMaps.build(self.rdc, rng, dtype) for _ in range(cfg.layers)]
        self.cross_rev = [CrossMaps.build(self.rdc, rng, dtype) for _ in range(cfg.layers)]
        std = np.sqrt(2.0 / (h + h))
        self.time_w = T.parameter((rng.standard_normal((h, h)) * std).astype(dtype))
        self.time_b = T.parameter(np.zeros(h, dtype=dtype))
        # epsilon output maps start at zero: the untrained denoiser predicts 0
        self.eps_fwd_w = T.parameter(np.zeros((h, h), dtype=dtype))
        self.eps_fwd_b = T.parameter(np.zeros(h, dtype=dtype))
        self.eps_rev_w = T.parameter(np.zeros((h, h), dtype=dtype))
        self.eps_rev_b = T.parameter(np.zeros(h, dtype=dtype))
        self.head_x = Head(h, cfg.vocab + 1, rng, dtype)
        self.head_y = Head(h, cfg.vocab + 1, rng, dtype)
        if cfg.position_encoding == "sinusoidal":
            self.posenc = sinusoidal_table(2 * cfg.max_len, h, dtype)
        elif cfg.position_encoding == "bidirectional":
            # half-width table: rows are indexed from both ends at use time
            self.posenc = sinusoidal_table(2 * cfg.max_len, h // 2, dtype)
        else:
            self.posenc = None

    # -- parameter registry -------------------------------------------
    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for side, enc in (("enc_x", self.enc_x), ("enc_y", self.enc_y)):
            for k, v in enc.named().items():
                out[f"{side}.{k}"] = v
        for side, up in (("up_x", self.up_x), ("up_y", self.up_y)):
            for k, v in up.named().items():
                out[f"{side}.{k}"] = v
        for i, lay in enumerate(self.layers):
            for k, v in lay.named().items():
                out[f"layers.{i}.{k}"] = v
        for name, maps in (("cross_fwd", self.cross_fwd), ("cross_rev", self.cross_rev)):
            for i, cm in enumerate(maps):
                for k, v in cm.named().items():
                    out[f"{name}.{i}.{k}"] = v
        out["time.w"] = self.time_w
        out["time.b"] = self.time_b
        out["eps_fwd.w"] = self.eps_fwd_w
        out["eps_fwd.b"] = self.eps_fwd_b
        out["eps_rev.w"] = self.eps_rev_w
        out["eps_rev.b"] = self.eps_rev_b
        for side, head in (("head_x", self.head_x), ("head_y", self.head_y)):
            for k, v in head.named().items():
                out[f"{side}.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lay in enumerate(self.layers):
            for k, v in lay.buffers().items():
                out[f"layers.{i}.{k}"] = v
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        parts = name.split(".")
        lay = self.layers[int(parts[1])]
        if parts[-1] == "bn_mean":
            lay.cnn.bn.mean = value.copy()
        elif parts[-1] == "bn_var":
            lay.cnn.bn.var = value.copy()
        else:
            raise ConfigError(f"unknown buffer {name!r}")

    def count_parameters(self) -> int:
        return int(sum(p.size for p in self.named_params().values()))

    def denoiser_param_names(self) -> set[str]:
        """Parameters used only by the denoising path (frozen in stage 3)."""
        return {name for name in self.named_params()
                if name.startswith(("time.", "cross_fwd.", "cross_rev.",
                                    "eps_fwd.", "eps_rev."))}

    def encoder_param_names(self) -> set[str]:
        return {name for name in self.named_params()
                if name.startswith(("enc_x.", "enc_y."))}

    def to_dtype(self, dtype) -> "DuplexModel":
        """Structural copy with every parameter/buffer cast to dtype."""
        clone = DuplexModel.__new__(DuplexModel)
        clone.cfg = self.cfg
        clone.rdc = self.rdc
        clone.enc_x, clone.enc_y = _copy_like(self.enc_x, dtype), _copy_like(self.enc_y, dtype)
        clone.up_x, clone.up_y = _copy_like(self.up_x, dtype), _copy_like(self.up_y, dtype)
        clone.layers = [_copy_layer(l, dtype) for l in self.layers]
        clone.cross_fwd = [_copy_cross(c, dtype) for c in self.cross_fwd]
        clone.cross_rev = [_copy_cross(c, dtype) for c in self.cross_rev]
        clone.time_w = _cast_param(self.time_w, dtype)
        clone.time_b = _cast_param(self.time_b, dtype)
        clone.eps_fwd_w = _cast_param(self.eps_fwd_w, dtype)
        clone.eps_fwd_b = _cast_param(self.eps_fwd_b, dtype)
        clone.eps_rev_w = _cast_param(self.eps_rev_w, dtype)
        clone.eps_rev_b = _cast_param(self.eps_rev_b, dtype)
        clone.head_x, clone.head_y = _copy_like(self.head_x, dtype), _copy_like(self.head_y, dtype)
        clone.posenc = None if self.posenc is None else self.posenc.astype(dtype)
        return clone

    def mirrored(self) -> "DuplexModel":
        """Relabel the two directions (shared tensors, no copies).

        Swaps the per-side components and reverses the layer order, so the
        mirrored forward path executes exactly the original reverse path.
        """
        m = DuplexModel.__new__(DuplexModel)
        m.cfg = self.cfg
        m.rdc = self.rdc
        m.enc_x, m.enc_y = self.enc_y, self.enc_x
        m.up_x, m.up_y = self.up_y, self.up_x
        m.layers = list(reversed(self.layers))
        m.cross_fwd = list(reversed(self.cross_rev))
        m.cross_rev = list(reversed(self.cross_fwd))
        m.time_w, m.time_b = self.time_w, self.time_b
        m.eps_fwd_w, m.eps_fwd_b = self.eps_rev_w, self.eps_rev_b
        m.eps_rev_w, m.eps_rev_b = self.eps_fwd_w, self.eps_fwd_b
        m.head_x, m.head_y = self.head_y, self.head_x
        m.posenc = self.posenc
        return m


def _cast_param(p: Tensor, dtype) -> Tensor:
    return T.parameter(p.data.astype(dtype))


def _copy_like(obj, dtype):
    clone = obj.__class__.__new__(obj.__class__)
    for k, v in obj.__dict__.items():
        if isinstance(v, Tensor):
            setattr(clone, k, _cast_param(v, dtype))
        else:
            setattr(clone, k, v)
    return clone


def _copy_cross(c: CrossMaps, dtype) -> CrossMaps:
    return CrossMaps(*(_cast_param(getattr(c, f), dtype)
                       for f in ("k_w", "k_b", "v_w", "v_b")))


def _copy_layer(lay: RdcLayerParams, dtype) -> RdcLayerParams:
    clone = RdcLayerParams.__new__(RdcLayerParams)
    for part in ("ffn_a", "mhsa", "cnn", "ffn_b"):
        src = getattr(lay, part)
        dst = src.__class__.__new__(src.__class__)
        for k, v in src.__dict__.items():
            if isinstance(v, Tensor):
                setattr(dst, k, _cast_param(v, dtype))
            elif isinstance(v, T.BnState):
                setattr(dst, k, v.astype(dtype))
            else:
                setattr(dst, k, v)
        setattr(clone, part, dst)
    return clone


def build_model(cfg: ModelConfig, hub: RngHub, dtype=None) -> DuplexModel:
    return DuplexModel(cfg, hub.stream("init"), dtype=dtype)


def parameter_count_formula(cfg: ModelConfig) -> int:
    """Closed-form total parameter count; must equal count_parameters()."""
    h = cfg.width
    c = h // 2
    v = cfg.vocab
    ffn = 2 * c + (c * 4 * c + 4 * c) + (4 * c * c + c)
    mhsa = 2 * c + 4 * (c * c + c) + cfg.heads * (2 * (2 * cfg.max_len) - 1)
    conv = 2 * c + (c * 2 * c + 2 * c) + c * cfg.kernel + 2 * c + (c * c + c)
    layer = 2 * ffn + mhsa + conv
    cross = 2 * (h * c + c)
    per_side = v * h + (h * h * cfg.upsample_kernel + h) + (h * (v + 1) + (v + 1))
    time_map = h * h + h
    eps_maps = 2 * (h * h + h)
    return (cfg.layers * (layer + 2 * cross)
            + 2 * per_side + time_map + eps_maps)


# ----------------------------------------------------------------------
# forward passes


@dataclass
class TranslateOut:
    logits: Tensor                  # [B, 2*T_src, V+1]
    out_rep: Tensor                 # [B, 2*T_src, h] stack output
    in_rep: Tensor                  # [B, 2*T_src, h] stack input
    up_mask: np.ndarray             # [B, 2*T_src]
    states: list                    # per-application merged outputs (if collected)


def _as_batch(ids: np.ndarray, mask: Optional[np.ndarray]):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None]
    return ids, mask


def encode_units(model: DuplexModel, ids: np.ndarray, mask: Optional[np.ndarray],
                 side: str) -> Tensor:
    """Clean per-side encoding: row-gathered embeddings, padding zeroed.

    This is also the space the diffusion process runs in.
    """
    ids, mask = _as_batch(ids, mask)
    v = model.cfg.vocab
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise DataError(f"unit id outside [0, {v}) in batch")
    enc = model.enc_x if side == "x" else model.enc_y
    emb = T.embedding(enc.table, ids)
    if not enc.trainable:
        emb = emb.detach()
    m = Tensor(mask[..., None].astype(emb.dtype), dtype=emb.dtype)
    return T.mul(emb, m)


def prep_source(model: DuplexModel, ids: np.ndarray, mask: Optional[np.ndarray],
                side: str):
    """Embed, upsample 2x, add position features. Returns (rep, up_mask)."""
    ids, mask = _as_batch(ids, mask)
    emb = encode_units(model, ids, mask, side)
    up = model.up_x if side == "x" else model.up_y
    rep = T.conv_transpose1d_double(emb, up.w, up.b)
    up_mask = np.repeat(mask, 2, axis=1)
    m = Tensor(up_mask[..., None].astype(rep.dtype), dtype=rep.dtype)
    rep = T.mul(rep, m)
    pf = position_features(model, rep.shape[1], up_mask)
    if pf is not None:
        rep = T.add(rep, Tensor(pf.astype(rep.dtype.type), dtype=rep.dtype))
    return rep, up_mask


def translate(model: DuplexModel, ids: np.ndarray, mask: Optional[np.ndarray],
              direction: str, mode: Mode, collect: bool = False) -> TranslateOut:
    """Run one direction end to end: fwd maps x-units to y-side logits,
    rev maps y-units to x-side logits."""
    if direction not in ("fwd", "rev"):
        raise ConfigError(f"direction must be 'fwd' or 'rev', got {direction!r}")
    side = "x" if direction == "fwd" else "y"
    rep, up_mask = prep_source(model, ids, mask, side)
    s = SplitState.split(rep, up_mask)
    run = stack_forward if direction == "fwd" else stack_reverse
    s, states = run(s, model.layers, model.rdc, mode, collect=collect)
    out_rep = s.merged()
    head = model.head_y if direction == "fwd" else model.head_x
    logits = T.linear(out_rep, head.w, head.b)
    return TranslateOut(logits=logits, out_rep=out_rep, in_rep=rep,
                        up_mask=up_mask, states=states)
