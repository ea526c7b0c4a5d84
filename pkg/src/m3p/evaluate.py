"""Decoding-based evaluation and embedding analysis."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .alignment import pool
from .augment import mask_token_ratio
from .bleu import corpus_bleu
from .data import Sample, Vocab, collate, detokenize
from .model import M3P

MODES = {"translate": "fused", "fused": "fused", "caption": "caption", "text": "text"}


def decode_samples(model: M3P, samples: Sequence[Sample], vocab: Vocab, mode: str = "translate",
                   batch_size: int = 128, max_len: int = 32) -> list[str]:
    out = []
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i:i + batch_size], vocab)
        for ids in model.greedy_translate(batch, max_len, MODES[mode]):
            out.append(detokenize(ids, vocab))
    return out


def evaluate_bleu(model: M3P, samples: Sequence[Sample], vocab: Vocab, mode: str = "translate",
                  max_len: int = 32) -> float:
    if not samples:
        raise ValueError("evaluation corpus is empty")
    hyps = decode_samples(model, samples, vocab, mode, max_len=max_len)
    refs = [detokenize(s.tgt_tokens, vocab) for s in samples]
    return corpus_bleu([h.split() for h in hyps], [r.split() for r in refs])


def mask_source(sample: Sample, ratio: float, rng: np.random.Generator) -> Sample:
    """Copy of ``sample`` with round(ratio * n) content tokens set to the mask id."""
    tokens = mask_token_ratio(sample.src_tokens, ratio, rng)
    return Sample(sample.src_lang, sample.tgt_lang, tokens, sample.tgt_tokens, sample.image,
                  sample.scene_id, sample.image_key)


def masked_source_eval(model: M3P, samples: Sequence[Sample], vocab: Vocab,
                       ratios: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0), mode: str = "translate",
                       seed: int = 0, max_len: int = 32) -> dict[float, float]:
    results = {}
    for r in ratios:
        rng = np.random.Generator(np.random.Philox(key=seed))
        masked = [mask_source(s, r, rng) for s in samples]
        results[float(r)] = evaluate_bleu(model, masked, vocab, mode, max_len)
    return results


def sentence_embeddings(model: M3P, samples: Sequence[Sample], vocab: Vocab, batch_size: int = 256) -> np.ndarray:
    """Pooled, unit-norm source-sentence embeddings (eval mode)."""
    was_training = model.training
    model.eval()
    rows = []
    try:
        with T.no_grad():
            for i in range(0, len(samples), batch_size):
                batch = collate(samples[i:i + batch_size], vocab)
                rows.append(pool(model.encode_text(batch.src, batch.src_pad), model.text_pool).data)
    finally:
        model.train(was_training)
    return np.concatenate(rows).astype(np.float64)


def parallel_cosine(model: M3P, samples: Sequence[Sample], vocab: Vocab) -> float:
    """Mean cosine over pairs sharing an image but differing in source language."""
    return parallel_cosine_from(sentence_embeddings(model, samples, vocab),
                                [s.image_key for s in samples], [s.src_lang for s in samples])


def parallel_cosine_from(emb: np.ndarray, keys: Sequence, langs: Sequence[str]) -> float:
    groups: dict = defaultdict(list)
    for i, k in enumerate(keys):
        groups[k].append(i)
    total, count = 0.0, 0
    for idx in groups.values():
        idx = np.asarray(idx)
        sims = emb[idx] @ emb[idx].T
        lang = np.asarray([langs[i] for i in idx])
        differ = np.triu(lang[:, None] != lang[None, :], k=1)
        total += float(sims[differ].sum())
        count += int(differ.sum())
    if count == 0:
        raise ValueError("no parallel pairs across languages")
    return total / count


def export_embeddings(model: M3P, samples: Sequence[Sample], vocab: Vocab, path) -> int:
    """CSV rows: source language, scene id, then the embedding components."""
    emb = sentence_embeddings(model, samples, vocab)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lang", "scene_id"] + [f"e{i}" for i in range(emb.shape[1])])
        for s, row in zip(samples, emb):
            scene = s.scene_id if s.scene_id is not None else s.image_key
            w.writerow([s.src_lang, scene] + [repr(float(v)) for v in row])
    return len(samples)


def dump_attention(attn: np.ndarray, src_words: Sequence[str], path) -> None:
    """CSV of head-averaged fusion attention: one row per source token, one column per patch."""
    mean = attn.mean(axis=0)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token"] + [f"patch{v}" for v in range(mean.shape[1])])
        for word, row in zip(src_words, mean):
            w.writerow([word] + [f"{x:.6f}" for x in row])
