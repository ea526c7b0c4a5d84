"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output gradient
to parent gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order. A graph can be walked once; the second walk raises.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "tensor",
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "concat",
    "embedding",
    "gather_last",
    "take",
    "softmax",
    "log_softmax",
    "layer_norm",
    "exp",
    "sigmoid",
    "gelu",
    "relu",
    "dropout",
    "l2_normalize",
    "cross_entropy_label_smoothed",
    "smoothed_target_entropy",
    "topological_order",
]


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _consumed(_g):
    raise RuntimeError("graph already consumed by a previous backward()")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents and self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        other = _wrap(other, self.dtype)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def astype(self, dtype) -> "Tensor":
        return astype(self, dtype)

    def __getitem__(self, key) -> "Tensor":
        return take(self, key)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` of every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward is _consumed:
            raise RuntimeError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is _consumed:
                raise RuntimeError("graph already consumed by a previous backward()")
            if g is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = _consumed
            node._parents = ()


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every parent before its children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return _make(y, (a,), lambda g: (-g * y * y,), "reciprocal")


def astype(a: Tensor, dtype) -> Tensor:
    src = a.data.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "astype")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = math.sqrt(2.0 / math.pi)
    x2 = xd * xd  # explicit products: float32 ``**`` is far slower
    inner = c * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(y, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def take(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing, gradient scattered back by accumulation."""
    out = a.data[key]
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "take")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; the gradient is scatter-added per id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    wshape = weight.shape

    def backward(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.ravel(), g.reshape(-1, wshape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def gather_last(x: Tensor, idx) -> Tensor:
    """``out[...] = x[..., idx[...]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (x,), backward, "gather_last")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


def smoothed_target_entropy(vocab_size: int, smoothing: float) -> float:
    """Entropy of the label-smoothed target distribution (the CE floor)."""
    if smoothing <= 0.0:
        return 0.0
    off = smoothing / vocab_size
    on = 1.0 - smoothing + off
    return -(on * math.log(on) + (vocab_size - 1) * off * math.log(off))


def cross_entropy_label_smoothed(
    logits: Tensor,
    targets,
    smoothing: float = 0.1,
    pad_id: int | None = 0,
    subtract_entropy: bool = False,
) -> Tensor:
    """Mean label-smoothed cross-entropy over non-pad target positions.

    The smoothed target is ``(1 - s) * onehot + s / V``. With
    ``subtract_entropy`` the constant entropy of that target is removed per
    position, giving KL(target || model): identical gradients, floor at zero.
    An all-pad batch yields a zero loss that still backpropagates (zeros).
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"{tgt.shape[0]} targets for {flat.shape[0]} logit rows")
    valid = np.ones_like(tgt, dtype=bool) if pad_id is None else tgt != pad_id
    if np.any((tgt[valid] < 0) | (tgt[valid] >= V)):
        raise IndexError("target id outside vocabulary")
    n = int(valid.sum())
    dtype = logits.dtype
    if n == 0:
        return _make(np.zeros((), dtype=dtype), (logits,), lambda g: (np.zeros_like(logits.data),), "xent")

    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe_t = np.where(valid, tgt, 0)
    nll = -logp[np.arange(len(tgt)), safe_t]
    smooth = -logp.mean(axis=1)
    per_pos = (1.0 - smoothing) * nll + smoothing * smooth
    if subtract_entropy:
        per_pos = per_pos - smoothed_target_entropy(V, smoothing)
    loss = (per_pos * valid).sum() / n

    def backward(g):
        q = np.full_like(flat, smoothing / V)
        q[np.arange(len(tgt)), safe_t] += 1.0 - smoothing
        grad = (np.exp(logp) - q) * (valid[:, None] / n)
        return ((grad * g).reshape(logits.shape).astype(dtype),)

    return _make(np.asarray(loss, dtype=dtype), (logits,), backward, "xent")
