"""Training objectives: CTC alignment, dense regression, cross-direction
feature agreement, and cycle consistency.

The CTC loss runs a log-space forward-backward pass over the standard
blank-interleaved label lattice and registers the analytic gradient

    dLoss/dlp[t, k] = -sum_{s: lab(s)=k} exp(alpha_t(s) + beta_t(s)
                                             - lp_t(lab(s)) - logZ)

as a single graph node (both DPs include the emission term, hence the
subtraction).  The composite objective runs the stack six times per
step: two transduction passes scored with CTC (unit mode) or masked MSE
(dense mode), two stochastic-free replays whose hidden states are
compared across directions, and two round-trip passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import Mode, SplitState, stack_forward, stack_reverse
from .decoding import collapse_path
from .errors import ConfigError, InfeasibleAlignmentError, ShapeError
from .model import DuplexModel, translate
from .tensor import Tensor, apply_primitive

__all__ = [
    "AlignmentLattice", "LossWeights", "build_lattice", "cc_loss",
    "composite_loss", "ctc_forward_backward", "ctc_loss", "fba_loss",
    "fba_weights", "mse_loss", "required_frames",
]

NEG_INF = -np.inf


def required_frames(labels: Sequence[int]) -> int:
    """Minimum number of frames that can emit `labels` under CTC
    (repeats need a separating blank)."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


@dataclass
class AlignmentLattice:
    """Blank-interleaved label sequence: blank, y1, blank, ..., yU, blank."""
    symbols: np.ndarray     # [2U+1] int
    skip_ok: np.ndarray     # [2U+1] bool, True where s-2 -> s is legal

    @property
    def states(self) -> int:
        return int(self.symbols.shape[0])


def build_lattice(labels: Sequence[int], blank: int) -> AlignmentLattice:
    labels = np.asarray(list(labels), dtype=np.int64)
    if labels.size and (labels.min() < 0 or (labels >= blank).any()):
        raise ShapeError(f"labels must lie in [0, {blank}), got {labels.tolist()}")
    u = labels.size
    sym = np.full(2 * u + 1, blank, dtype=np.int64)
    sym[1::2] = labels
    skip = np.zeros(2 * u + 1, dtype=bool)
    # diagonal skips land only on label states whose previous label differs
    for s in range(2, 2 * u + 1):
        skip[s] = sym[s] != blank and sym[s] != sym[s - 2]
    return AlignmentLattice(sym, skip)


def ctc_forward_backward(lp: np.ndarray, labels: Sequence[int], blank: int):
    """Run both lattice DPs on one element.

    lp is [T, V+1] log-probabilities.  Returns (alpha, beta, logz_fwd,
    logz_bwd, grad) where grad is dLoss/dlp for Loss = -logz_fwd; the
    two partition estimates agree up to rounding.
    """
    lp = np.asarray(lp, dtype=np.float64)
    t_total = lp.shape[0]
    lat = build_lattice(labels, blank)
    if required_frames(labels) > t_total:
        raise InfeasibleAlignmentError(
            f"{t_total} frames cannot emit {len(list(labels))} labels "
            f"(need {required_frames(labels)})")
    s_total = lat.states
    emit = lp[:, lat.symbols]  # [T, S]

    alpha = np.full((t_total, s_total), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_total > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_total):
        prev = alpha[t - 1]
        step = np.concatenate([[NEG_INF], prev[:-1]])
        acc = np.logaddexp(prev, step)
        skip = np.concatenate([[NEG_INF, NEG_INF], prev[:-2]])[:s_total]
        acc = np.where(lat.skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = emit[t] + acc

    beta = np.full((t_total, s_total), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_total > 1:
        beta[-1, -2] = emit[-1, -2]
    # the skip mask indexed at the landing state works in reverse too:
    # s -> s+2 is legal iff skip_ok[s+2]
    skip_fwd = np.concatenate([lat.skip_ok[2:], [False, False]])[:s_total]
    for t in range(t_total - 2, -1, -1):
        nxt = beta[t + 1]
        step = np.concatenate([nxt[1:], [NEG_INF]])
        acc = np.logaddexp(nxt, step)
        skip = np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])[:s_total]
        acc = np.where(skip_fwd, np.logaddexp(acc, skip), acc)
        beta[t] = emit[t] + acc

    logz_fwd = np.logaddexp(alpha[-1, -1], alpha[-1, -2] if s_total > 1 else NEG_INF)
    logz_bwd = np.logaddexp(beta[0, 0], beta[0, 1] if s_total > 1 else NEG_INF)

    with np.errstate(invalid="ignore"):
        gamma = alpha + beta - emit  # both DPs carry the emission term
    occ = np.exp(gamma - logz_fwd)  # [T, S]
    grad = np.zeros_like(lp)
    np.add.at(grad.T, lat.symbols, occ.T)
    return alpha, beta, float(logz_fwd), float(logz_bwd), -grad


def ctc_loss(log_probs: Tensor, labels, blank: int,
             input_lengths=None, reduction: str = "mean") -> Tensor:
    """Negative log marginal of `labels` over all monotonic alignments.

    log_probs is [B, T, V+1] (or [T, V+1] with a flat label list for a
    single element) and must already be normalized along the last axis.
    input_lengths marks the valid frame count per element; frames beyond
    it get zero gradient.  Targets that cannot fit their frame budget
    raise InfeasibleAlignmentError.
    """
    single = log_probs.ndim == 2
    lp = T.reshape(log_probs, (1,) + log_probs.shape) if single else log_probs
    if lp.ndim != 3:
        raise ShapeError(f"ctc_loss expects [B, T, V+1], got {log_probs.shape}")
    if single:
        labels = [list(labels)]
        if input_lengths is not None and np.isscalar(input_lengths):
            input_lengths = [input_lengths]
    b, t_max, _ = lp.shape
    if len(labels) != b:
        raise ShapeError(f"ctc_loss: {b} score rows but {len(labels)} label rows")
    lengths = [t_max] * b if input_lengths is None else [int(n) for n in input_lengths]
    if len(lengths) != b:
        raise ShapeError(f"ctc_loss: {b} score rows but {len(lengths)} lengths")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")

    grads = np.zeros(lp.shape, dtype=np.float64)
    total = 0.0
    for i in range(b):
        n = lengths[i]
        if not 1 <= n <= t_max:
            raise ShapeError(f"ctc_loss: length {n} outside 1..{t_max}")
        _, _, logz, _, g = ctc_forward_backward(lp.data[i, :n], labels[i], blank)
        total += -logz
        grads[i, :n] = g
    scale = 1.0 / b if reduction == "mean" else 1.0
    out = np.asarray(total * scale, dtype=lp.dtype)
    gcast = (grads * scale).astype(lp.dtype)

    def pull(g):
        return (g * gcast,)

    return apply_primitive(out, "ctc", (lp,), pull)


# ----------------------------------------------------------------------
# dense regression


def mse_loss(pred: Tensor, ref, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared element difference; with a [B, T] mask, averaged
    over valid positions only."""
    ref_t = ref if isinstance(ref, Tensor) else Tensor(np.asarray(ref), dtype=pred.dtype)
    if ref_t.shape != pred.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {ref_t.shape} differ")
    sq = T.square(T.sub(pred, ref_t))
    if mask is None:
        return sq.mean()
    m = np.asarray(mask, dtype=bool)
    n = float(m.sum()) * pred.shape[-1]
    if n == 0:
        raise ShapeError("mse_loss: mask selects nothing")
    w = Tensor(m[..., None].astype(pred.dtype), dtype=pred.dtype)
    return T.mul(T.mul(sq, w).sum(), 1.0 / n)


# ----------------------------------------------------------------------
# cross-direction feature agreement


def _flat_cosine(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of two equally-shaped tensors flattened to vectors.
    All-zero inputs score 0: the numerator vanishes while eps keeps the
    ratio finite."""
    num = T.reduce_sum(T.mul(a, b))
    na = T.reduce_sum(T.square(a))
    nb = T.reduce_sum(T.square(b))
    denom = T.sqrt(T.add(T.mul(na, nb), np.asarray(eps, dtype=a.dtype)))
    return T.div(num, denom)


def fba_loss(fwd_layers: Sequence[Tensor], rev_layers: Sequence[Tensor],
             weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean cosine distance between paired per-layer states:
    (1/L) sum_l (1 - cos(fwd_l, stop_grad(rev_l))).

    The cosine for each pair is taken over the flattened valid
    timesteps; `weights` is an optional [B, T] gate (zero drops a
    position).  rev_layers is the reference side: no gradient flows into
    it.  Lies in [0, 2]; exactly 0 only when every pair is positively
    proportional.
    """
    if len(fwd_layers) != len(rev_layers) or not fwd_layers:
        raise ShapeError(
            f"fba_loss: need matching nonempty state lists, "
            f"got {len(fwd_layers)} and {len(rev_layers)}")
    dt = fwd_layers[0].dtype
    if weights is not None and weights.sum() == 0:
        return Tensor(np.asarray(0.0, dtype=dt))
    total = None
    for a, b in zip(fwd_layers, rev_layers):
        tc = min(a.shape[1], b.shape[1]) if a.ndim == 3 else None
        av = T.narrow(a, 1, 0, tc) if tc is not None and tc < a.shape[1] else a
        bv = T.narrow(b, 1, 0, tc) if tc is not None and tc < b.shape[1] else b
        bv = bv.detach()
        if av.shape != bv.shape:
            raise ShapeError(f"fba_loss: pair shapes {av.shape} and {bv.shape} differ")
        if weights is not None:
            w = Tensor(weights[:, : av.shape[1], None].astype(dt), dtype=dt)
            av = T.mul(av, w)
            bv = T.mul(bv, w)
        dist = T.sub(np.asarray(1.0, dtype=dt), _flat_cosine(av, bv))
        total = dist if total is None else T.add(total, dist)
    return T.mul(total, 1.0 / len(fwd_layers))


def fba_weights(src_lens: Sequence[int], tgt_lens: Sequence[int],
                t_common: int) -> np.ndarray:
    """Position gate for state agreement: only elements whose two sides
    have equal length participate (their state sequences are then
    index-aligned), over their valid doubled extent."""
    b = len(src_lens)
    w = np.zeros((b, t_common), dtype=np.float64)
    for i, (sl, tl) in enumerate(zip(src_lens, tgt_lens)):
        if sl == tl:
            w[i, : min(2 * sl, t_common)] = 1.0
    return w


# ----------------------------------------------------------------------
# cycle consistency


def cc_loss(original, roundtrip, blank: Optional[int] = None,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """Distance between a sequence and its round-trip reconstruction.

    Dense kind: both arguments are Tensors of equal shape; scored with
    (masked) MSE.  Unit kind: `original` is a unit id sequence and
    `roundtrip` the [T, V+1] normalized scores of the return pass,
    scored with CTC (blank defaults to the last column).  Any other
    combination is a configuration error.
    """
    if isinstance(original, Tensor) and isinstance(roundtrip, Tensor):
        return mse_loss(roundtrip, original.detach(), mask)
    if isinstance(original, Tensor) or not isinstance(roundtrip, Tensor):
        raise ConfigError(
            "cc_loss: expected two tensors (dense) or a unit sequence "
            f"plus a score tensor, got {type(original).__name__} and "
            f"{type(roundtrip).__name__}")
    if roundtrip.ndim != 2:
        raise ConfigError(f"cc_loss: unit-kind scores must be [T, V+1], got {roundtrip.shape}")
    if blank is None:
        blank = roundtrip.shape[-1] - 1
    return ctc_loss(roundtrip, list(original), blank)


def _cycle_unit_terms(model: DuplexModel, logits: np.ndarray, lens: Sequence[int],
                      orig_labels: Sequence[Sequence[int]], direction_back: str,
                      mode: Mode) -> tuple[Tensor, int]:
    """Greedy-decode each row of `logits`, re-embed the decode as input
    to the opposite direction, and CTC-score the original units against
    the result.  Rows whose decode is empty, over-long, or too short to
    ever emit the original labels are skipped; returns (loss, n_used).
    """
    blank = model.cfg.blank
    decodes, keep = [], []
    for i, n in enumerate(lens):
        ids = collapse_path(logits[i, : 2 * n].argmax(axis=-1), blank)
        if not ids or len(ids) > model.cfg.max_len:
            continue
        if required_frames(orig_labels[i]) > 2 * len(ids):
            continue
        decodes.append(ids)
        keep.append(i)
    dt = model.time_w.dtype
    if not keep:
        return Tensor(np.asarray(0.0, dtype=dt)), 0
    lmax = max(len(d) for d in decodes)
    ids = np.zeros((len(keep), lmax), dtype=np.int64)
    mask = np.zeros((len(keep), lmax), dtype=bool)
    for r, d in enumerate(decodes):
        ids[r, : len(d)] = d
        mask[r, : len(d)] = True
    out = translate(model, ids, mask, direction_back, mode)
    lp = T.log_softmax(out.logits, axis=-1)
    loss = ctc_loss(lp, [list(orig_labels[i]) for i in keep], blank,
                    input_lengths=[2 * len(d) for d in decodes])
    return loss, len(keep)


def _cycle_dense_term(model: DuplexModel, out, direction: str, mode: Mode) -> Tensor:
    """Push the transduction output straight back through the opposite
    orientation and compare against the prepared input.  The stack
    inverts itself, so this stays near zero by construction."""
    s = SplitState.split(out.out_rep, out.up_mask)
    if direction == "fwd":
        back, _ = stack_reverse(s, model.layers, model.rdc, mode)
    else:
        back, _ = stack_forward(s, model.layers, model.rdc, mode)
    return cc_loss(out.in_rep, back.merged(), mask=out.up_mask)


# ----------------------------------------------------------------------
# composite objective


@dataclass
class LossWeights:
    """w1/w2 scale the two transduction scores (CTC in unit mode, MSE in
    dense mode), w3/w4 the two agreement terms, w5/w6 the two cycles."""
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 1.0
    w6: float = 1.0

    def validate(self) -> "LossWeights":
        vals = [self.w1, self.w2, self.w3, self.w4, self.w5, self.w6]
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be >= 0, got {vals}")
        if all(v == 0 for v in vals):
            raise ConfigError("at least one loss weight must be > 0")
        return self


def composite_loss(model: DuplexModel, src_ids: np.ndarray, src_mask: np.ndarray,
                   tgt_ids: np.ndarray, tgt_mask: np.ndarray,
                   weights: LossWeights, rng: Optional[np.random.Generator],
                   mode: str = "unit", dropout: bool = True,
                   agreement_refs: Optional[tuple] = None):
    """Full bidirectional objective for one batch.

    Stack passes, in order: (A) source-to-target and (B) target-to-source
    transduction in training mode with running-stat updates; (C, D) the
    same two passes replayed without stochastic pieces to collect
    per-layer states for the agreement terms; (E, F) round-trip passes in
    training mode but without touching running stats.  In unit mode the
    transductions are CTC-scored and the round trip re-embeds the greedy
    decode; in dense mode both use masked MSE against the opposite
    side's (detached) prepared encoding.  Returns (loss, parts).

    agreement_refs, if given, is a (fwd_states, aligned_rev_states) pair
    substituted for the stop-gradient side of the two agreement terms.
    Finite-difference certification needs this: the reference must stay
    pinned at the unperturbed point while parameters are probed, which
    is exactly what the backward pass assumes of a stopped gradient.
    """
    weights.validate()
    if mode not in ("unit", "mel"):
        raise ConfigError(f"composite mode must be 'unit' or 'mel', got {mode!r}")
    blank = model.cfg.blank
    src_lens = [int(m.sum()) for m in src_mask]
    tgt_lens = [int(m.sum()) for m in tgt_mask]
    src_labels = [list(map(int, src_ids[i, : src_lens[i]])) for i in range(len(src_lens))]
    tgt_labels = [list(map(int, tgt_ids[i, : tgt_lens[i]])) for i in range(len(tgt_lens))]

    mode_train = Mode(training=dropout, update_bn=True, rng=rng)
    mode_cc = Mode(training=dropout, update_bn=False, rng=rng)
    mode_replay = Mode(training=False, update_bn=False, rng=None)

    parts: dict[str, float] = {}
    terms: list[Tensor] = []

    def add_term(name: str, value: Tensor, weight: float) -> None:
        parts[name] = value.item()
        if weight > 0:
            terms.append(T.mul(value, float(weight)) if weight != 1.0 else value)

    out_fwd = translate(model, src_ids, src_mask, "fwd", mode_train)
    out_rev = translate(model, tgt_ids, tgt_mask, "rev", mode_train)

    if mode == "unit":
        score_y = ctc_loss(T.log_softmax(out_fwd.logits, axis=-1), tgt_labels, blank,
                           input_lengths=[2 * n for n in src_lens])
        score_x = ctc_loss(T.log_softmax(out_rev.logits, axis=-1), src_labels, blank,
                           input_lengths=[2 * n for n in tgt_lens])
    else:
        # dense targets: the opposite side's own encoding, frame-doubled
        # by the same upsampler path, compared where both sides exist
        from .model import prep_source

        with T.no_grad():
            ref_y, ref_y_mask = prep_source(model, tgt_ids, tgt_mask, "y")
            ref_x, ref_x_mask = prep_source(model, src_ids, src_mask, "x")
        score_y = _dense_score(out_fwd, ref_y, ref_y_mask)
        score_x = _dense_score(out_rev, ref_x, ref_x_mask)
    add_term("score_fwd", score_y, weights.w1)
    add_term("score_rev", score_x, weights.w2)

    if weights.w3 > 0 or weights.w4 > 0:
        rf = translate(model, src_ids, src_mask, "fwd", mode_replay, collect=True)
        rr = translate(model, tgt_ids, tgt_mask, "rev", mode_replay, collect=True)
        # state i of one orientation meets state L-1-i of the other:
        # both then describe the same physical layer
        rev_aligned = list(reversed(rr.states))
        ref_fwd, ref_rev = (rf.states, rev_aligned) if agreement_refs is None \
            else agreement_refs
        tc = min(rf.states[0].shape[1], rr.states[0].shape[1])
        w = fba_weights(src_lens, tgt_lens, tc)
        if weights.w3 > 0:
            add_term("fba_fwd", fba_loss(rf.states, ref_rev, w), weights.w3)
        if weights.w4 > 0:
            add_term("fba_rev", fba_loss(rev_aligned, ref_fwd, w), weights.w4)

    if weights.w5 > 0:
        if mode == "unit":
            v, n = _cycle_unit_terms(model, out_fwd.logits.data, src_lens,
                                     src_labels, "rev", mode_cc)
            parts["cc_fwd_used"] = float(n)
        else:
            v = _cycle_dense_term(model, out_fwd, "fwd", mode_cc)
        add_term("cc_fwd", v, weights.w5)
    if weights.w6 > 0:
        if mode == "unit":
            v, n = _cycle_unit_terms(model, out_rev.logits.data, tgt_lens,
                                     tgt_labels, "fwd", mode_cc)
            parts["cc_rev_used"] = float(n)
        else:
            v = _cycle_dense_term(model, out_rev, "rev", mode_cc)
        add_term("cc_rev", v, weights.w6)

    if not terms:
        raise ConfigError("composite loss has no active terms")
    loss = terms[0]
    for t in terms[1:]:
        loss = T.add(loss, t)
    parts["loss"] = loss.item()
    return loss, parts


def _dense_score(out, ref: Tensor, ref_mask: np.ndarray) -> Tensor:
    """Masked MSE between a transduction output and a dense reference,
    over the common time prefix where both sides are valid."""
    tc = min(out.out_rep.shape[1], ref.shape[1])
    pred = T.narrow(out.out_rep, 1, 0, tc) if tc < out.out_rep.shape[1] else out.out_rep
    tgt = T.narrow(ref, 1, 0, tc) if tc < ref.shape[1] else ref
    both = out.up_mask[:, :tc] & ref_mask[:, :tc]
    return mse_loss(pred, tgt.detach(), both)
