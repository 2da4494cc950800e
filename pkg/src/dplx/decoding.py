"""Decoding and translation quality metrics.

Greedy decoding collapses the framewise argmax path (merge repeats, drop
blanks).  The beam decoder is a prefix search over labelings: each
prefix keeps separate mass for paths ending in blank vs. non-blank so
that extensions merge correctly, which makes the search exact whenever
the beam is wide enough to hold every reachable labeling.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import EVAL, SplitState, stack_forward, stack_reverse
from .errors import ConfigError, DataError
from .model import DuplexModel, prep_source, translate

NEG_INF = -np.inf


@dataclass
class Hypothesis:
    units: list[int]
    score: float


def collapse_path(path: Sequence[int], blank: int) -> list[int]:
    """Merge consecutive repeats, then remove blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def ctc_greedy(log_probs: np.ndarray, blank: int) -> list[int]:
    """Best-path decode of one [T, V+1] score matrix."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2:
        raise ConfigError(f"ctc_greedy expects [T, V+1], got {lp.shape}")
    return collapse_path(lp.argmax(axis=-1), blank)


def ctc_beam(log_probs: np.ndarray, blank: int,
             beam_size: int = 10) -> list[Hypothesis]:
    """Prefix beam search.  Mass of alignments mapping to the same
    collapsed labeling is summed, so with a beam wide enough to hold
    every reachable labeling the top hypothesis is the exact marginal
    argmax.  Returns hypotheses sorted by score descending."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    t_total, n_sym = lp.shape
    # prefix -> [mass ending in blank, mass ending in its last symbol]
    beams: dict[tuple[int, ...], list[float]] = {(): [0.0, NEG_INF]}
    for t in range(t_total):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = np.logaddexp(cell[0], total + row[blank])
            if prefix:
                # same symbol again without a blank extends the same labeling
                cell[1] = np.logaddexp(cell[1], pnb + row[prefix[-1]])
            for s in range(n_sym):
                if s == blank:
                    continue
                ext = nxt[prefix + (s,)]
                mass = pb if prefix and s == prefix[-1] else total
                ext[1] = np.logaddexp(ext[1], mass + row[s])
        # zero-mass prefixes (impossible labelings) must not hold beam slots
        live = [kv for kv in nxt.items() if np.isfinite(np.logaddexp(*kv[1]))]
        ranked = sorted(live, key=lambda kv: -np.logaddexp(kv[1][0], kv[1][1]))
        beams = dict(ranked[:beam_size])
    out = [Hypothesis(list(p), float(np.logaddexp(pb, pnb)))
           for p, (pb, pnb) in beams.items()]
    out.sort(key=lambda h: -h.score)
    return out


# ----------------------------------------------------------------------
# metrics


def _ngrams(seq: Sequence[int], n: int) -> dict[tuple, int]:
    counts: dict[tuple, int] = defaultdict(int)
    for i in range(len(seq) - n + 1):
        counts[tuple(seq[i: i + n])] += 1
    return counts


def corpus_bleu(references: Sequence[Sequence[int]],
                hypotheses: Sequence[Sequence[int]], max_order: int = 4,
                smooth: bool = False) -> float:
    """Corpus-level geometric-mean n-gram precision with brevity penalty
    exp(1 - r/c).  Unsmoothed by default, so any empty precision bucket
    zeroes the score; smooth=True applies add-one to orders above 1."""
    if len(references) != len(hypotheses):
        raise ConfigError(
            f"corpus_bleu: {len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise DataError("corpus_bleu: empty corpus")
    matches = np.zeros(max_order, dtype=np.float64)
    totals = np.zeros(max_order, dtype=np.float64)
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref, hyp = list(ref), list(hyp)
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_order + 1):
            hc = _ngrams(hyp, n)
            rc = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, rc.get(g, 0)) for g, c in hc.items())
    if smooth:
        matches[1:] += 1.0
        totals[1:] += 1.0
    if hyp_len == 0 or (totals == 0).any() or (matches == 0).any():
        return 0.0
    log_p = np.log(matches / totals).mean()
    bp = 1.0 if hyp_len >= ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    return float(bp * np.exp(log_p)) * 100.0


unit_bleu = corpus_bleu


def sentence_bleu(reference: Sequence[int], hypothesis: Sequence[int],
                  max_order: int = 4) -> float:
    """Single-pair BLEU with add-one smoothing on the higher orders (an
    unsmoothed score is 0 for almost every short pair)."""
    return corpus_bleu([reference], [hypothesis], max_order, smooth=True)


def token_accuracy(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """Positionwise agreement normalized by the longer sequence."""
    ref, hyp = list(reference), list(hypothesis)
    denom = max(len(ref), len(hyp))
    if denom == 0:
        return 1.0
    hits = sum(1 for a, b in zip(ref, hyp) if a == b)
    return hits / denom


def exact_match(references: Sequence[Sequence[int]],
                hypotheses: Sequence[Sequence[int]]) -> float:
    if not references:
        return 0.0
    hits = sum(1 for r, h in zip(references, hypotheses) if list(r) == list(h))
    return hits / len(references)


# ----------------------------------------------------------------------
# evaluation drivers


@dataclass
class EvalReport:
    bleu: float
    token_accuracy: float
    exact_match: float
    count: int

    def as_dict(self) -> dict:
        return {"bleu": self.bleu, "token_accuracy": self.token_accuracy,
                "exact_match": self.exact_match, "count": self.count}


def _pad_batch(seqs: Sequence[Sequence[int]]):
    lens = [len(s) for s in seqs]
    lmax = max(lens)
    ids = np.zeros((len(seqs), lmax), dtype=np.int64)
    mask = np.zeros((len(seqs), lmax), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask, lens


def decode_batch(model: DuplexModel, sources: Sequence[Sequence[int]],
                 direction: str, beam_size: int = 0) -> list[list[int]]:
    """Translate a list of unit sequences; beam_size 0 means greedy."""
    if not sources:
        return []
    ids, mask, lens = _pad_batch(sources)
    with T.no_grad():
        out = translate(model, ids, mask, direction, EVAL)
        lp = T.log_softmax(out.logits, axis=-1).data
    blank = model.cfg.blank
    hyps = []
    for i, n in enumerate(lens):
        scores = lp[i, : 2 * n]
        if beam_size and beam_size > 0:
            hyps.append(ctc_beam(scores, blank, beam_size)[0].units)
        else:
            hyps.append(ctc_greedy(scores, blank))
    return hyps


def evaluate_translation(model: DuplexModel, pairs, direction: str,
                         beam_size: int = 0, batch_size: int = 32) -> EvalReport:
    """Score one translation direction over (src, tgt) unit pairs."""
    srcs = [p.src if direction == "fwd" else p.tgt for p in pairs]
    refs = [p.tgt if direction == "fwd" else p.src for p in pairs]
    hyps: list[list[int]] = []
    for lo in range(0, len(srcs), batch_size):
        hyps.extend(decode_batch(model, srcs[lo: lo + batch_size], direction, beam_size))
    acc = float(np.mean([token_accuracy(r, h) for r, h in zip(refs, hyps)])) if refs else 0.0
    return EvalReport(bleu=corpus_bleu(refs, hyps), token_accuracy=acc,
                      exact_match=exact_match(refs, hyps), count=len(refs))


def representation_roundtrip_error(model: DuplexModel, sources: Sequence[Sequence[int]],
                                   direction: str = "fwd") -> float:
    """Max elementwise error of pushing prepared inputs through one
    orientation of the stack and straight back through the other.  The
    two applications invert each other, so this measures only rounding,
    trained or not."""
    if not sources:
        return 0.0
    ids, mask, _ = _pad_batch(sources)
    side = "x" if direction == "fwd" else "y"
    with T.no_grad():
        rep, up_mask = prep_source(model, ids, mask, side)
        s = SplitState.split(rep, up_mask)
        if direction == "fwd":
            mid, _ = stack_forward(s, model.layers, model.rdc, EVAL)
            back, _ = stack_reverse(mid, model.layers, model.rdc, EVAL)
        else:
            mid, _ = stack_reverse(s, model.layers, model.rdc, EVAL)
            back, _ = stack_forward(mid, model.layers, model.rdc, EVAL)
        err = np.abs(back.merged().data - rep.data)
    return float(err.max())


def roundtrip_eval(model: DuplexModel, sources: Sequence[Sequence[int]],
                   direction_order: str = "xyx", beam_size: int = 0,
                   batch_size: int = 32) -> dict:
    """Translate out and back at the unit level, plus the dense
    round-trip error of the stack itself.

    direction_order 'xyx' starts from x units (x -> y -> x); 'yxy'
    starts from y units.  Empty or over-long intermediate decodes count
    as misses."""
    if direction_order not in ("xyx", "yxy"):
        raise ConfigError(f"direction_order must be 'xyx' or 'yxy', got {direction_order!r}")
    direction = "fwd" if direction_order == "xyx" else "rev"
    back_dir = "rev" if direction == "fwd" else "fwd"
    mids: list[list[int]] = []
    for lo in range(0, len(sources), batch_size):
        mids.extend(decode_batch(model, sources[lo: lo + batch_size], direction, beam_size))
    usable = [(i, m) for i, m in enumerate(mids)
              if m and len(m) <= model.cfg.max_len]
    backs: dict[int, list[int]] = {}
    batch = [m for _, m in usable]
    rebuilt: list[list[int]] = []
    for lo in range(0, len(batch), batch_size):
        rebuilt.extend(decode_batch(model, batch[lo: lo + batch_size], back_dir, beam_size))
    for (i, _), b in zip(usable, rebuilt):
        backs[i] = b
    hits = sum(1 for i, s in enumerate(sources) if backs.get(i) == list(s))
    refs = [list(s) for s in sources]
    hyps = [backs.get(i, []) for i in range(len(sources))]
    return {
        "exact_match": hits / len(sources) if sources else 0.0,
        "bleu": corpus_bleu(refs, hyps) if sources else 0.0,
        "representation_error": representation_roundtrip_error(
            model, sources[: min(len(sources), batch_size)], direction),
        "count": len(sources),
        "decoded": len(usable),
    }
