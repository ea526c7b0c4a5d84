"""Parameter containers and Transformer sublayers built on ``m3p.tensor``."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Minimal parameter registry: attributes that are parameters or modules."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def normal_param(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def const_param(value: float, shape, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, std: float = 0.02):
        self.weight = normal_param(rng, (d_in, d_out), std, dtype)
        self.bias = const_param(0.0, (d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = const_param(1.0, (d,), dtype)
        self.beta = const_param(0.0, (d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def key_padding_bias(pad_mask: np.ndarray, dtype) -> np.ndarray:
    """[B, S] bool (True = pad) -> additive bias of shape [B, 1, 1, S]."""
    return np.where(pad_mask, NEG_INF, 0.0).astype(dtype)[:, None, None, :]


def causal_bias(length: int, dtype) -> np.ndarray:
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, NEG_INF, 0.0).astype(dtype)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads of size ``d/heads``.

    ``last_attention`` keeps the most recent probabilities ([B, A, T, S]) for
    inspection; it is not part of the graph.
    """

    def __init__(self, d: int, heads: int, rng, dtype=np.float32, dropout: float = 0.0):
        if d % heads:
            raise ValueError(f"hidden dim {d} not divisible by {heads} heads")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.p = dropout
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.heads, self.dh).transpose(0, 2, 1, 3)

    def heads_output(self, query: Tensor, kv: Tensor, bias: np.ndarray | None = None, rng=None) -> Tensor:
        """Concatenated head outputs before the output projection: [B, T, d]."""
        if query.shape[-1] != self.d or kv.shape[-1] != self.d:
            raise T.ShapeError(f"attention expects hidden dim {self.d}")
        B, L, _ = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.dh))
        if bias is not None:
            scores = scores + Tensor(bias)
        attn = T.softmax(scores, axis=-1)
        self.last_attention = attn.data
        attn = T.dropout(attn, self.p, rng, self.training)
        ctx = attn @ v
        return ctx.transpose(0, 2, 1, 3).reshape(B, L, self.d)

    def __call__(self, query: Tensor, kv: Tensor, bias: np.ndarray | None = None, rng=None) -> Tensor:
        return self.o(self.heads_output(query, kv, bias, rng))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)
        self.p = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = T.dropout(T.gelu(self.fc1(x)), self.p, rng, self.training)
        return self.fc2(h)


class EncoderLayer(Module):
    """Pre-norm block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, d: int, heads: int, ffn: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype, dropout)
        self.ln2 = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, ffn, rng, dtype, dropout)
        self.p = dropout

    def __call__(self, x: Tensor, bias: np.ndarray | None = None, rng=None) -> Tensor:
        h = self.ln1(x)
        x = x + T.dropout(self.attn(h, h, bias, rng), self.p, rng, self.training)
        x = x + T.dropout(self.ffn(self.ln2(x), rng), self.p, rng, self.training)
        return x


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, d: int, heads: int, ffn: int, rng, dtype=np.float32, dropout: float = 0.0):
        self.ln1 = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, heads, rng, dtype, dropout)
        self.ln2 = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, dtype, dropout)
        self.ln3 = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, ffn, rng, dtype, dropout)
        self.p = dropout

    def __call__(self, x: Tensor, memory: Tensor, self_bias, memory_bias, rng=None) -> Tensor:
        h = self.ln1(x)
        x = x + T.dropout(self.self_attn(h, h, self_bias, rng), self.p, rng, self.training)
        x = x + T.dropout(self.cross_attn(self.ln2(x), memory, memory_bias, rng), self.p, rng, self.training)
        x = x + T.dropout(self.ffn(self.ln3(x), rng), self.p, rng, self.training)
        return x
