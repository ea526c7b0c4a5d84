"""Conditional vision-language memory, the multilingual decoder, branch schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, EncoderStates
from .layers import (DecoderLayer, LayerNorm, Linear, Module, MultiHeadAttention, causal_bias,
                     const_param, key_padding_bias, normal_param)
from .tensor import Tensor

BRANCHES = ("text", "image", "fused")


@dataclass
class FusedMemory:
    states: Tensor          # [B, U, d]
    pad_mask: np.ndarray    # [B, U], from the text side

    def as_states(self) -> EncoderStates:
        return EncoderStates(self.states, self.pad_mask)


class CVLM(Module):
    """Text queries attend over vision keys/values; residual keeps the text.

    e = s + W_O [head_1 .. head_A], head_a = softmax(q_a k_a^T / sqrt(d/A)) v_a
    with q from a layer-normed copy of s and k, v from h. One vector per
    source token comes out, whatever the number of patches.
    """

    def __init__(self, d: int, heads: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.ln_q = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype, dropout)
        self.p = dropout

    @property
    def last_attention(self) -> np.ndarray | None:
        return self.attn.last_attention

    def __call__(self, text: EncoderStates, vision: EncoderStates, rng=None) -> FusedMemory:
        s, h = text.hidden, vision.hidden
        if s.shape[-1] != h.shape[-1]:
            raise T.ShapeError(f"text dim {s.shape[-1]} != vision dim {h.shape[-1]}")
        if s.shape[0] != h.shape[0]:
            raise T.ShapeError("text and vision batch sizes differ")
        bias = key_padding_bias(vision.pad_mask, s.dtype) if vision.pad_mask.any() else None
        fused = self.attn(self.ln_q(s), h, bias, rng)
        return FusedMemory(s + T.dropout(fused, self.p, rng, self.training), text.pad_mask)


class ConcatFusion(Module):
    """Baseline: memory = [s ; h] along the sequence axis."""

    def __call__(self, text: EncoderStates, vision: EncoderStates, rng=None) -> FusedMemory:
        return FusedMemory(T.concat([text.hidden, vision.hidden], axis=1),
                           np.concatenate([text.pad_mask, vision.pad_mask], axis=1))


class GatedFusion(Module):
    """Baseline: memory = s + g * W mean(h), g a learned scalar gate (sigmoid)."""

    def __init__(self, d: int, rng, dtype=np.float32):
        self.proj = Linear(d, d, rng, dtype)
        self.gate = const_param(0.0, (1,), dtype)

    def __call__(self, text: EncoderStates, vision: EncoderStates, rng=None) -> FusedMemory:
        pooled = vision.hidden.mean(axis=1, keepdims=True)
        g = T.sigmoid(self.gate)
        return FusedMemory(text.hidden + self.proj(pooled) * g, text.pad_mask)


class Decoder(Module):
    """Pre-norm Transformer decoder whose output layer is the tied embedding."""

    def __init__(self, cfg: EncoderConfig, embedding: Tensor, rng, dtype=np.float32):
        self.cfg = cfg
        self._embedding = [embedding]
        self.pos = normal_param(rng, (cfg.max_positions, cfg.d), 0.02, dtype)
        self.layers = [DecoderLayer(cfg.d, cfg.heads, cfg.ffn, rng, dtype, cfg.dropout) for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.d, dtype)

    @property
    def embedding(self) -> Tensor:
        return self._embedding[0]

    def __call__(self, prefix: np.ndarray, memory: EncoderStates, prefix_pad: np.ndarray | None = None,
                 rng=None) -> Tensor:
        """Teacher-forced logits [B, T, |V|]; position t sees prefix[:t+1] only."""
        prefix = np.asarray(prefix, dtype=np.int64)
        B, L = prefix.shape
        if L > self.cfg.max_positions:
            raise ValueError(f"prefix length {L} exceeds max positions {self.cfg.max_positions}")
        if memory.length == 0:
            raise ValueError("decoder memory is empty")
        dtype = self.pos.dtype
        x = T.embedding(self.embedding, prefix) + self.pos[:L]
        x = T.dropout(x, self.cfg.dropout, rng, self.training)
        self_bias = causal_bias(L, dtype)[None, None]
        if prefix_pad is not None and np.any(prefix_pad):
            self_bias = self_bias + key_padding_bias(prefix_pad, dtype)
        mem_bias = key_padding_bias(memory.pad_mask, dtype) if np.any(memory.pad_mask) else None
        for layer in self.layers:
            x = layer(x, memory.hidden, self_bias, mem_bias, rng)
        x = self.final_ln(x)
        return x @ self.embedding.T


@dataclass
class BranchSchedule:
    """Per-step i.i.d. draw among text-only, image-only, and fused training."""

    p_text: float = 0.25
    p_image: float = 0.25
    p_fused: float = 0.50

    def __post_init__(self):
        probs = self.probs
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"branch probabilities must be a distribution, got {probs.tolist()}")

    @property
    def probs(self) -> np.ndarray:
        return np.array([self.p_text, self.p_image, self.p_fused], dtype=np.float64)


def pick_branch(schedule: BranchSchedule, step: int, rng: np.random.Generator) -> str:
    # ``step`` is accepted for logging symmetry; draws depend only on rng state
    u = rng.random()
    cum = np.cumsum(schedule.probs)
    return BRANCHES[min(int(np.searchsorted(cum, u, side="right")), 2)]
