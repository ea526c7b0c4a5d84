"""Transformer text and vision encoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import EncoderLayer, LayerNorm, Linear, Module, key_padding_bias, normal_param
from .tensor import Tensor


@dataclass
class EncoderConfig:
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn: int = 128
    dropout: float = 0.1
    max_positions: int = 64

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")


@dataclass
class EncoderStates:
    hidden: Tensor          # [B, L, d]
    pad_mask: np.ndarray    # [B, L], True on padding

    @property
    def length(self) -> int:
        return self.hidden.shape[1]


class TransformerStack(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.layers = [EncoderLayer(cfg.d, cfg.heads, cfg.ffn, rng, dtype, cfg.dropout) for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.d, dtype)

    def __call__(self, x: Tensor, pad_mask: np.ndarray, rng=None) -> Tensor:
        bias = key_padding_bias(pad_mask, x.dtype)
        for layer in self.layers:
            x = layer(x, bias, rng)
        return self.final_ln(x)


class TextEncoder(Module):
    """Token embedding (shared matrix, owned by the caller) + learned positions."""

    def __init__(self, cfg: EncoderConfig, embedding: Tensor, rng, dtype=np.float32):
        self.cfg = cfg
        self._embedding = [embedding]  # shared; registered by the owner
        self.pos = normal_param(rng, (cfg.max_positions, cfg.d), 0.02, dtype)
        self.stack = TransformerStack(cfg, rng, dtype)

    @property
    def embedding(self) -> Tensor:
        return self._embedding[0]

    def embed(self, ids: np.ndarray) -> Tensor:
        U = ids.shape[1]
        if U > self.cfg.max_positions:
            raise ValueError(f"sequence length {U} exceeds max positions {self.cfg.max_positions}")
        return T.embedding(self.embedding, ids) + self.pos[:U]

    def __call__(self, ids: np.ndarray, pad_mask: np.ndarray | None = None, rng=None) -> EncoderStates:
        ids = np.asarray(ids, dtype=np.int64)
        if pad_mask is None:
            pad_mask = np.zeros(ids.shape, dtype=bool)
        x = T.dropout(self.embed(ids), self.cfg.dropout, rng, self.training)
        return EncoderStates(self.stack(x, pad_mask, rng), pad_mask)


class VisionEncoder(Module):
    """Linear patch projection + learned positions + Transformer stack."""

    def __init__(self, cfg: EncoderConfig, patch_dim: int, rng, dtype=np.float32):
        self.cfg = cfg
        self.patch_dim = patch_dim
        self.proj = Linear(patch_dim, cfg.d, rng, dtype)
        self.pos = normal_param(rng, (cfg.max_positions, cfg.d), 0.02, dtype)
        self.stack = TransformerStack(cfg, rng, dtype)

    def embed_patches(self, patches: np.ndarray) -> Tensor:
        patches = np.asarray(patches)
        if patches.shape[-1] != self.patch_dim:
            raise ValueError(f"patch dim {patches.shape[-1]} != configured {self.patch_dim}")
        return self.proj(Tensor(patches.astype(self.proj.weight.dtype)))

    def __call__(self, patches: np.ndarray, rng=None) -> EncoderStates:
        patches = np.asarray(patches)
        B, V, _ = patches.shape
        if V > self.cfg.max_positions:
            raise ValueError(f"{V} patches exceed max positions {self.cfg.max_positions}")
        x = self.embed_patches(patches) + self.pos[:V]
        x = T.dropout(x, self.cfg.dropout, rng, self.training)
        pad = np.zeros((B, V), dtype=bool)
        return EncoderStates(self.stack(x, pad, rng), pad)
