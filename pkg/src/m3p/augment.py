"""Masked text spans, masked patches, and pixel transforms for contrastive views."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BOS, EOS, MASK, PAD, PatchGrid, patchify

TRANSFORMS = ("crop", "resize", "rotate90", "cutout", "color_distort", "gaussian_blur", "sobel")


@dataclass
class AugmentConfig:
    text_mask_fraction: float = 0.15
    mean_span_length: float = 3.0
    patch_mask_fraction: float = 0.25
    image_transforms: list[str] = field(default_factory=lambda: ["gaussian_blur"])
    seed: int = 0

    def __post_init__(self):
        for name in ("text_mask_fraction", "patch_mask_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mean_span_length < 1:
            raise ValueError("mean_span_length must be >= 1")
        unknown = set(self.image_transforms) - set(TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown image transforms: {sorted(unknown)}")


def maskable_positions(tokens: np.ndarray, specials: tuple[int, ...] = (PAD, BOS, EOS, MASK)) -> np.ndarray:
    """Content positions; position 0 (the language tag or bos) never qualifies."""
    tokens = np.asarray(tokens)
    ok = ~np.isin(tokens, specials)
    ok[:1] = False
    return np.flatnonzero(ok)


def mask_text_spans(tokens: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Replace contiguous spans by the mask id.

    The masked count is ``fraction * n`` with stochastic rounding, so its
    expectation is exact. Span lengths are geometric with the configured
    mean; each span starts on a still-unmasked position and runs right over
    maskable positions until the budget is spent.
    """
    out = np.array(tokens, copy=True)
    pos = maskable_positions(out)
    n = len(pos)
    if n == 0 or cfg.text_mask_fraction <= 0.0:
        return out
    target = cfg.text_mask_fraction * n
    budget = int(np.floor(target))
    if rng.random() < target - budget:
        budget += 1
    masked = np.zeros(n, dtype=bool)
    p_stop = 1.0 / cfg.mean_span_length
    while masked.sum() < budget:
        free = np.flatnonzero(~masked)
        start = int(free[rng.integers(len(free))])
        length = int(rng.geometric(p_stop))
        remaining = budget - int(masked.sum())
        i = start
        while length > 0 and remaining > 0 and i < n:
            if not masked[i]:
                masked[i] = True
                remaining -= 1
            length -= 1
            i += 1
    out[pos[masked]] = MASK
    return out


def mask_token_ratio(tokens: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Mask ``round(ratio * n)`` content positions chosen uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    out = np.array(tokens, copy=True)
    pos = maskable_positions(out)
    k = int(round(ratio * len(pos)))
    if k:
        out[rng.choice(pos, size=k, replace=False)] = MASK
    return out


def mask_image_patches(grid: PatchGrid, cfg: AugmentConfig, rng: np.random.Generator) -> PatchGrid:
    V = grid.num_patches
    k = int(np.floor(cfg.patch_mask_fraction * V))
    patches = grid.patches.copy()
    if k:
        patches[rng.choice(V, size=k, replace=False)] = 0.0
    return grid.with_patches(patches)


# ---------------------------------------------------------------------------
# pixel transforms; every one keeps H x W x C


def _resize_nearest(img: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(H) * h) // H, h - 1)
    cols = np.minimum((np.arange(W) * w) // W, w - 1)
    return img[rows][:, cols]


def crop(img: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    H, W = img.shape[:2]
    return _resize_nearest(img[top:top + height, left:left + width], H, W)


def resize(img: np.ndarray, factor: float) -> np.ndarray:
    """Down-sample by ``factor`` and back (nearest neighbour)."""
    H, W = img.shape[:2]
    small = _resize_nearest(img, max(1, int(round(H * factor))), max(1, int(round(W * factor))))
    return _resize_nearest(small, H, W)


def rotate90(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != img.shape[1]:
        raise ValueError("rotate90 keeps dims only for square images")
    return np.rot90(img, k=1, axes=(0, 1)).copy()


def cutout(img: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    out = img.copy()
    out[top:top + height, left:left + width] = 0.0
    return out


def color_distort(img: np.ndarray, gains: np.ndarray) -> np.ndarray:
    return np.clip(img * np.asarray(gains)[None, None, :], 0.0, 1.0)


def _conv3x3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = img.shape[:2]
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy:dy + H, dx:dx + W]
    return out


def _gaussian_kernel(sigma: float = 1.0) -> np.ndarray:
    ax = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(img: np.ndarray) -> np.ndarray:
    return _conv3x3(img, _gaussian_kernel(1.0))


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel(img: np.ndarray) -> np.ndarray:
    """Per-channel gradient magnitude."""
    # separable form: differencing first keeps flat regions exactly zero
    p = np.pad(np.asarray(img, dtype=np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = img.shape[:2]
    dx = p[:, 2:W + 2] - p[:, :W]
    dy = p[2:H + 2] - p[:H]
    gx = dx[:H] + 2 * dx[1:H + 1] + dx[2:H + 2]
    gy = dy[:, :W] + 2 * dy[:, 1:W + 1] + dy[:, 2:W + 2]
    return np.sqrt(gx * gx + gy * gy)


def transform_image(img: np.ndarray, transform: str, rng: np.random.Generator) -> np.ndarray:
    """Apply one named transform with parameters drawn from ``rng``."""
    H, W = img.shape[:2]
    if transform == "crop":
        h = int(rng.integers((3 * H) // 4, H + 1))
        w = int(rng.integers((3 * W) // 4, W + 1))
        return crop(img, int(rng.integers(H - h + 1)), int(rng.integers(W - w + 1)), h, w)
    if transform == "resize":
        return resize(img, float(rng.uniform(0.5, 1.0)))
    if transform == "rotate90":
        return rotate90(img)
    if transform == "cutout":
        h = int(rng.integers(0, H // 2 + 1))
        w = int(rng.integers(0, W // 2 + 1))
        return cutout(img, int(rng.integers(H - h + 1)), int(rng.integers(W - w + 1)), h, w)
    if transform == "color_distort":
        return color_distort(img, rng.uniform(0.8, 1.2, size=img.shape[2]))
    if transform == "gaussian_blur":
        return gaussian_blur(img)
    if transform == "sobel":
        return sobel(img)
    raise ValueError(f"unknown transform {transform!r}")


def augment_image(grid: PatchGrid, cfg: AugmentConfig, rng: np.random.Generator) -> PatchGrid:
    """One transform drawn from the configured set, then patch masking."""
    if cfg.image_transforms:
        name = cfg.image_transforms[int(rng.integers(len(cfg.image_transforms)))]
        grid = patchify(transform_image(grid.pixels(), name, rng), grid.patch_size)
    return mask_image_patches(grid, cfg, rng)
