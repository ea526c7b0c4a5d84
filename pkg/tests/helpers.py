"""Finite-difference gradient oracles and small fixtures shared by the tests."""

from __future__ import annotations

import numpy as np

from m3p.tensor import Tensor

EPS = 1e-6


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def leaf(rng, shape, low=-2.0, high=2.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64)


def analytic_grads(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def numeric_grads(loss_fn, tensors, eps=EPS):
    """Central differences, one coordinate at a time."""
    out = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(loss_fn().data)
            flat[i] = old - eps
            down = float(loss_fn().data)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(a, n) -> float:
    a = np.concatenate([x.ravel() for x in a])
    n = np.concatenate([x.ravel() for x in n])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def coordinate_check(loss_fn, tensors) -> float:
    return relative_error(analytic_grads(loss_fn, tensors), numeric_grads(loss_fn, tensors))


def directional_check(loss_fn, tensors, rng, directions=2, eps=EPS) -> float:
    """Worst relative error of <grad, v> against the central difference along v.

    Used for whole blocks, where a per-coordinate sweep over every parameter
    would be too slow for a hundred seeds.
    """
    grads = analytic_grads(loss_fn, tensors)
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(t.data.shape) for t in tensors]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        for t, v in zip(tensors, vs):
            t.data += eps * v
        up = float(loss_fn().data)
        for t, v in zip(tensors, vs):
            t.data -= 2 * eps * v
        down = float(loss_fn().data)
        for t, v in zip(tensors, vs):
            t.data += eps * v
        fd = (up - down) / (2 * eps)
        an = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def readout(out: Tensor, rng) -> Tensor:
    """Scalar projection of a tensor onto a fixed random direction."""
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def tiny_model(vocab_size: int, patch_dim: int, seed: int = 3, d: int = 16, layers: int = 1,
               precision: str = "fp64", fusion: str = "cvlm", max_positions: int = 64):
    """A one-layer fp64 model, small enough for finite differences."""
    from m3p.encoders import EncoderConfig
    from m3p.model import M3P, ModelConfig

    enc = EncoderConfig(layers=layers, d=d, heads=2, ffn=2 * d, dropout=0.0, max_positions=max_positions)
    cfg = ModelConfig(vocab_size, patch_dim, enc, enc, enc, fusion=fusion, precision=precision)
    return M3P(cfg, seed=seed).eval()


def states(rng, B, L, d, pad=None):
    from m3p.encoders import EncoderStates

    pad = np.zeros((B, L), dtype=bool) if pad is None else pad
    return EncoderStates(leaf(rng, (B, L, d)), pad)


def small_run_config(data_dir, out_dir=None, **sections):
    """RunConfig for a one-layer d=16 model on a toy directory; ``sections`` override keys."""
    from m3p.config import RunConfig

    enc = {"layers": 1, "d": 16, "heads": 2, "ffn": 32, "dropout": 0.1, "max_positions": 32}
    raw = {
        "data": {"dir": str(data_dir), "patch_size": 8, "batch_size": 8, "warmup_epochs": 2},
        "model": {"text_encoder": dict(enc), "vision_encoder": dict(enc), "decoder": dict(enc)},
        "train": {"epochs": 2, "lr": 1e-3, "warmup_steps": 5, "eval_every": 0,
                  "out_dir": str(out_dir or data_dir)},
    }
    for section, values in sections.items():
        raw.setdefault(section, {}).update(values)
    return RunConfig.from_dict(raw)


ACCEPTANCE_LINES: dict[int, str] = {}


def check(number: int, name: str, ok: bool, detail: str) -> None:
    """Record a PASS/FAIL line for the end-of-session summary, then assert."""
    line = f"criterion {number:>2} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line
