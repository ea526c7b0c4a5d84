"""Corpus-level BLEU-4 with add-one smoothing on the 2..4-gram precisions."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_counts(hyp: Sequence[str], ref: Sequence[str], n: int) -> tuple[int, int]:
    """(matches clipped by reference counts, hypothesis n-gram total)."""
    h, r = ngrams(hyp, n), ngrams(ref, n)
    return sum(min(c, r[g]) for g, c in h.items()), sum(h.values())


def modified_precision(hyp: Sequence[str], ref: Sequence[str], n: int) -> float:
    m, c = clipped_counts(hyp, ref, n)
    return m / c if c else 0.0


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    if hyp_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """BLEU in [0, 100] for tokenised hypotheses against single references.

    Unigram precision is unsmoothed, so a corpus without a single matching
    word scores 0.
    """
    if len(hyps) != len(refs):
        raise ValueError("need exactly one reference per hypothesis")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            m, c = clipped_counts(h, r, n)
            matches[n - 1] += m
            totals[n - 1] += c
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    return 100.0 * brevity_penalty(hyp_len, ref_len) * math.exp(log_p / max_n)
