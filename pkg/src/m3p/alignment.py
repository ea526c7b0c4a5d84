"""Pooled sentence/image embeddings and the symmetric in-batch InfoNCE loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment_image, mask_text_spans
from .data import PatchGrid, Sample
from .encoders import EncoderStates
from .layers import Linear, Module
from .tensor import Tensor


class PoolHead(Module):
    """Masked mean over positions, linear projection, L2 normalisation."""

    def __init__(self, d: int, rng, dtype=np.float32, out_dim: int | None = None):
        self.proj = Linear(d, out_dim or d, rng, dtype)

    def __call__(self, states: EncoderStates) -> Tensor:
        return pool(states, self)


def masked_mean(states: EncoderStates) -> Tensor:
    keep = ~np.asarray(states.pad_mask)
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("cannot pool a sequence whose positions are all masked")
    dtype = states.hidden.dtype
    weights = (keep / counts[:, None]).astype(dtype)[:, :, None]
    return (states.hidden * Tensor(weights)).sum(axis=1)


def pool(states: EncoderStates, head: PoolHead) -> Tensor:
    return T.l2_normalize(head.proj(masked_mean(states)), axis=-1)


@dataclass
class ContrastiveBatch:
    text_emb: Tensor    # [B, d], unit rows
    image_emb: Tensor   # [B, d], unit rows
    temperature: float = 0.1

    def __post_init__(self):
        if self.text_emb.shape != self.image_emb.shape:
            raise ValueError("text and image embeddings must have the same shape")
        if self.temperature <= 0:
            raise ValueError("contrastive temperature must be positive")


def info_nce(batch: ContrastiveBatch) -> Tensor:
    """(1/B) * sum_k [-log p(text k | image k) - log p(image k | text k)].

    Row k of the similarity matrix holds image k against every text in the
    batch; column k holds text k against every image. Off-diagonal entries
    are the in-batch negatives.
    """
    z, x = batch.image_emb, batch.text_emb
    B = z.shape[0]
    if B == 0:
        raise ValueError("info_nce needs a non-empty batch")
    logits = (z @ x.T) * (1.0 / batch.temperature)
    diag = np.arange(B)
    image_to_text = T.gather_last(T.log_softmax(logits, axis=1), diag)
    text_to_image = T.gather_last(T.log_softmax(logits.T, axis=1), diag)
    return -(image_to_text.sum() + text_to_image.sum()) * (1.0 / B)


def first_occurrences(keys) -> np.ndarray:
    """Indices of the first row for each distinct key (order preserved)."""
    seen: set = set()
    idx = []
    for i, k in enumerate(keys):
        if k not in seen:
            seen.add(k)
            idx.append(i)
    return np.asarray(idx, dtype=np.int64)


def augmented_views(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, PatchGrid]:
    """Masked-span text view and transformed/masked image view of one sample."""
    text = mask_text_spans(sample.src_tokens, cfg, rng)
    image = augment_image(sample.image, cfg, rng)
    return text, image
