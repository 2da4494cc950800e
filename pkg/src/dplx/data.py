"""Synthetic parallel unit corpora and batching.

Each pair (src, tgt) satisfies tgt = G(src) exactly for a generator G
chosen by difficulty:

    copy                identity
    shift               unit id + 1 mod V
    reverse_shift       reverse the sequence, then shift (reordering)
    local_swap_stretch  swap adjacent positions pairwise, then duplicate
                        every unit divisible by 3 (length growth, still
                        within the 2x upsampling budget)

Splits are decided per pair by hashing the source sequence, so they are
stable across runs and disjoint by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

DIFFICULTIES = ("copy", "shift", "reverse_shift", "local_swap_stretch")
SHIFT_K = 1


@dataclass
class ParallelPair:
    src: list[int]
    tgt: list[int]


def apply_mapping(src: Sequence[int], difficulty: str, v: int) -> list[int]:
    """Ground-truth mapping G for one source sequence."""
    src = [int(u) for u in src]
    if difficulty == "copy":
        return list(src)
    if difficulty == "shift":
        return [(u + SHIFT_K) % v for u in src]
    if difficulty == "reverse_shift":
        return [(u + SHIFT_K) % v for u in reversed(src)]
    if difficulty == "local_swap_stretch":
        swapped = list(src)
        for i in range(0, len(swapped) - 1, 2):
            swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
        out: list[int] = []
        for u in swapped:
            out.append(u)
            if u % 3 == 0:
                out.append(u)
        return out
    raise ConfigError(f"unknown difficulty {difficulty!r}; have {DIFFICULTIES}")


def verify_pair(pair: ParallelPair, difficulty: str, v: int) -> bool:
    """Re-check the ground-truth mapping on a (possibly re-read) pair."""
    if not pair.src or min(pair.src) < 0 or max(pair.src) >= v:
        return False
    return pair.tgt == apply_mapping(pair.src, difficulty, v)


def _min_frames(labels: Sequence[int]) -> int:
    # duplicated from the loss module's required_frames to keep the data
    # layer free of model dependencies
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def generate_corpus(n_pairs: int, v: int, max_len: int, difficulty: str,
                    seed: int) -> list[ParallelPair]:
    """Draw `n_pairs` source sequences and map them.  Sources that would
    break the length bound or the alignment feasibility of either
    direction (tgt must fit in 2*len(src) frames and vice versa) are
    redrawn, so every emitted pair is trainable as generated."""
    if v < 2 or max_len < 2:
        raise ConfigError(f"need v >= 2 and max_len >= 2, got v={v}, max_len={max_len}")
    if n_pairs < 0:
        raise ConfigError(f"n_pairs must be >= 0, got {n_pairs}")
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"unknown difficulty {difficulty!r}; have {DIFFICULTIES}")
    rng = np.random.default_rng(seed)
    pairs: list[ParallelPair] = []
    guard = 0
    while len(pairs) < n_pairs:
        guard += 1
        if guard > 1000 * max(n_pairs, 1):
            raise DataError(
                f"generator kept drawing infeasible pairs for {difficulty} "
                f"(v={v}, max_len={max_len})")
        length = int(rng.integers(1, max_len + 1))
        src = [int(u) for u in rng.integers(0, v, size=length)]
        tgt = apply_mapping(src, difficulty, v)
        if not 1 <= len(tgt) <= max_len:
            continue
        if len(tgt) > 2 * len(src):
            continue
        if _min_frames(tgt) > 2 * len(src) or _min_frames(src) > 2 * len(tgt):
            continue
        pairs.append(ParallelPair(src, tgt))
    return pairs


# ----------------------------------------------------------------------
# splits and file IO


def split_of(src: Sequence[int]) -> str:
    """Deterministic split assignment by source hash: buckets 0 and 1 of
    20 go to test and dev, the rest to train."""
    digest = hashlib.sha256(np.asarray(src, dtype=np.int64).tobytes()).digest()
    bucket = int.from_bytes(digest[:8], "big") % 20
    if bucket == 0:
        return "test"
    if bucket == 1:
        return "dev"
    return "train"


def split_corpus(pairs: Iterable[ParallelPair]) -> dict[str, list[ParallelPair]]:
    out: dict[str, list[ParallelPair]] = {"train": [], "dev": [], "test": []}
    for p in pairs:
        out[split_of(p.src)].append(p)
    return out


def save_jsonl(path, pairs: Iterable[ParallelPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"src": p.src, "tgt": p.tgt}) + "\n")


def load_jsonl(path) -> list[ParallelPair]:
    pairs = []
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such corpus file: {path}")
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                pairs.append(ParallelPair([int(u) for u in row["src"]],
                                          [int(u) for u in row["tgt"]]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: bad corpus row ({exc})") from exc
    return pairs


# ----------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src_ids: np.ndarray   # [B, Ts] int64
    src_mask: np.ndarray  # [B, Ts] bool
    tgt_ids: np.ndarray   # [B, Tt] int64
    tgt_mask: np.ndarray  # [B, Tt] bool

    @property
    def size(self) -> int:
        return int(self.src_ids.shape[0])


def _pad(seqs: Sequence[Sequence[int]], pad_unit: int):
    lmax = max(len(s) for s in seqs)
    ids = np.full((len(seqs), lmax), pad_unit, dtype=np.int64)
    mask = np.zeros((len(seqs), lmax), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batches(pairs: Sequence[ParallelPair], max_batch_tokens: int,
                 pad_unit: int = 0) -> list[Batch]:
    """Length-bucketed batching: pairs are grouped by similar length so
    that padded source plus target tokens stay under the budget.  The
    grouping is a pure function of the input order."""
    if not pairs:
        raise DataError("make_batches: empty pair list")
    if max_batch_tokens < 1:
        raise ConfigError(f"max_batch_tokens must be >= 1, got {max_batch_tokens}")
    order = sorted(range(len(pairs)),
                   key=lambda i: (len(pairs[i].src), len(pairs[i].tgt), i))
    batches: list[Batch] = []
    group: list[ParallelPair] = []
    smax = tmax = 0
    for idx in order:
        p = pairs[idx]
        cost_alone = len(p.src) + len(p.tgt)
        if cost_alone > max_batch_tokens:
            raise DataError(
                f"pair with {cost_alone} tokens exceeds the batch budget "
                f"{max_batch_tokens}")
        ns, nt = max(smax, len(p.src)), max(tmax, len(p.tgt))
        if group and (len(group) + 1) * (ns + nt) > max_batch_tokens:
            batches.append(_finish(group, pad_unit))
            group, smax, tmax = [], 0, 0
            ns, nt = len(p.src), len(p.tgt)
        group.append(p)
        smax, tmax = ns, nt
    if group:
        batches.append(_finish(group, pad_unit))
    return batches


def _finish(group: Sequence[ParallelPair], pad_unit: int) -> Batch:
    src_ids, src_mask = _pad([p.src for p in group], pad_unit)
    tgt_ids, tgt_mask = _pad([p.tgt for p in group], pad_unit)
    return Batch(src_ids, src_mask, tgt_ids, tgt_mask)


def epoch_batches(pairs: Sequence[ParallelPair], epoch: int, seed: int,
                  max_batch_tokens: int, pad_unit: int = 0) -> list[Batch]:
    """Shuffled batches for one epoch; a pure function of (pairs, epoch,
    seed), so any epoch can be reproduced in isolation."""
    rng = np.random.default_rng((int(seed) * 1_000_003 + int(epoch)) % (2 ** 63))
    perm = rng.permutation(len(pairs))
    shuffled = [pairs[int(i)] for i in perm]
    batches = make_batches(shuffled, max_batch_tokens, pad_unit)
    # make_batches sorts by length, so without this second shuffle every
    # epoch would sweep short -> long and running batch-norm statistics
    # would always reflect whichever lengths came last
    order = rng.permutation(len(batches))
    return [batches[int(i)] for i in order]
