"""Corpora, tokenization, patch grids, temperature-based multilingual sampling."""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD, BOS, EOS, MASK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<mask>")


class OOVError(KeyError):
    pass


def lang_tag(lang: str) -> str:
    return f"[{lang}]"


class Vocab:
    """Closed word-level vocabulary: specials, then language tags, then words."""

    def __init__(self, languages: Sequence[str], words: Sequence[str]):
        self.languages = list(languages)
        self.tokens = list(SPECIALS) + [lang_tag(l) for l in self.languages] + list(words)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def tag_id(self, lang: str) -> int:
        return self.index[lang_tag(lang)]

    def is_tag(self, token_id: int) -> bool:
        return len(SPECIALS) <= token_id < len(SPECIALS) + len(self.languages)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved tokens")
        rest = tokens[len(SPECIALS):]
        langs = []
        for t in rest:
            if t.startswith("[") and t.endswith("]"):
                langs.append(t[1:-1])
            else:
                break
        return cls(langs, rest[len(langs):])

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens([l for l in lines if l])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Whitespace tokens to ids framed as ``[bos|tag] w1 .. wn eos``.

    A leading language tag takes the place of ``bos``.
    """
    words = text.split()
    ids = []
    for w in words:
        if w not in vocab.index:
            raise OOVError(w)
        ids.append(vocab.index[w])
    if ids and vocab.is_tag(ids[0]):
        return ids + [EOS]
    return [BOS] + ids + [EOS]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True, eq=False)
class PatchGrid:
    height: int
    width: int
    channels: int
    patch_size: int
    patches: np.ndarray  # [V, P*P*C]

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]

    def pixels(self) -> np.ndarray:
        return unpatchify(self)

    def with_patches(self, patches: np.ndarray) -> "PatchGrid":
        return PatchGrid(self.height, self.width, self.channels, self.patch_size, patches)


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """H x W x C image -> V = HW/P^2 row-major flattened P x P x C patches."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    H, W, C = image.shape
    P = int(patch_size)
    if P < 1 or H % P or W % P:
        raise ValueError(f"patch size {P} must divide image dims {H}x{W}")
    grid = image.reshape(H // P, P, W // P, P, C).transpose(0, 2, 1, 3, 4)
    return PatchGrid(H, W, C, P, grid.reshape((H // P) * (W // P), P * P * C).copy())


def unpatchify(grid: PatchGrid) -> np.ndarray:
    H, W, C, P = grid.height, grid.width, grid.channels, grid.patch_size
    x = grid.patches.reshape(H // P, W // P, P, P, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(H, W, C).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 PPM from a float image in [0, 1] (or uint8)."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    H, W, C = img.shape
    if C != 3:
        raise ValueError("PPM needs 3 channels")
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + img.tobytes())


def _parse_ppm(raw: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("only 8-bit binary PPM (P6) is supported")
    W, H = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1: pos + 1 + H * W * 3], dtype=np.uint8)
    return data.reshape(H, W, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return _parse_ppm(Path(path).read_bytes())


_B64_PREFIX = "base64:"


def load_image(ref: str, base_dir: Path) -> np.ndarray:
    if ref.startswith(_B64_PREFIX):
        return _parse_ppm(base64.b64decode(ref[len(_B64_PREFIX):]))
    return read_ppm(base_dir / ref)


# ---------------------------------------------------------------------------
# samples and corpora


@dataclass(eq=False)
class Sample:
    src_lang: str
    tgt_lang: str
    src_tokens: np.ndarray
    tgt_tokens: np.ndarray
    image: PatchGrid
    scene_id: int | None = None
    image_key: str = ""

    def __post_init__(self):
        if not self.image_key:
            if self.scene_id is not None:
                self.image_key = f"scene:{self.scene_id}"
            else:
                self.image_key = hashlib.sha1(self.image.patches.tobytes()).hexdigest()


@dataclass
class Corpus:
    src_lang: str
    tgt_lang: str
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class CorpusSet:
    corpora: list[Corpus]
    vocab: Vocab

    def __post_init__(self):
        if not self.corpora:
            raise ValueError("a corpus set needs at least one corpus")
        for c in self.corpora:
            if not c.samples:
                raise ValueError(f"corpus {c.src_lang}-{c.tgt_lang} is empty")

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.corpora]

    def all_samples(self) -> list[Sample]:
        return [s for c in self.corpora for s in c.samples]

    def __len__(self) -> int:
        return sum(self.sizes)


def make_sample(src_text: str, tgt_text: str, src_lang: str, tgt_lang: str, image: np.ndarray,
                vocab: Vocab, patch_size: int, scene_id: int | None = None) -> Sample:
    """Apply the prompt scheme: the target-language tag opens the source."""
    src = tokenize(f"{lang_tag(tgt_lang)} {src_text}".strip(), vocab)
    tgt = tokenize(tgt_text, vocab)
    return Sample(src_lang, tgt_lang, np.asarray(src, np.int64), np.asarray(tgt, np.int64),
                  patchify(image, patch_size), scene_id)


def load_corpus_file(path, vocab: Vocab, patch_size: int, cache: dict | None = None) -> Corpus:
    path = Path(path)
    cache = {} if cache is None else cache
    samples = []
    src_lang = tgt_lang = None
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        src_lang, tgt_lang = rec["src_lang"], rec["tgt_lang"]
        key = (str(path.parent), rec["image"])
        if key not in cache:
            cache[key] = load_image(rec["image"], path.parent)
        samples.append(make_sample(rec["src_text"], rec["tgt_text"], src_lang, tgt_lang,
                                   cache[key], vocab, patch_size, rec.get("scene_id")))
    return Corpus(src_lang, tgt_lang, samples)


def load_corpus_dir(directory, vocab: Vocab, patch_size: int) -> CorpusSet:
    files = sorted(Path(directory).glob("*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no .jsonl corpora in {directory}")
    cache: dict = {}
    return CorpusSet([load_corpus_file(f, vocab, patch_size, cache) for f in files], vocab)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True, eq=False)
class Batch:
    src: np.ndarray         # [B, U] int, PAD-filled
    src_pad: np.ndarray     # [B, U] bool, True on padding
    tgt: np.ndarray         # [B, T]
    tgt_pad: np.ndarray
    patches: np.ndarray     # [B, V, P*P*C]
    tgt_tag: np.ndarray     # [B]
    samples: tuple[Sample, ...] = field(repr=False)

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def image_keys(self) -> list[str]:
        return [s.image_key for s in self.samples]


def pad_sequences(seqs: Sequence[np.ndarray], pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    lengths = np.array([len(s) for s in seqs])
    return out, np.arange(width)[None, :] >= lengths[:, None]


def collate(samples: Sequence[Sample], vocab: Vocab) -> Batch:
    samples = tuple(samples)
    src, src_pad = pad_sequences([s.src_tokens for s in samples])
    tgt, tgt_pad = pad_sequences([s.tgt_tokens for s in samples])
    patches = np.stack([s.image.patches for s in samples])
    tags = np.array([vocab.tag_id(s.tgt_lang) for s in samples], dtype=np.int64)
    return Batch(src, src_pad, tgt, tgt_pad, patches, tags, samples)


# ---------------------------------------------------------------------------
# temperature-based sampling


@dataclass
class SamplerConfig:
    peak_temperature: float = 5.0
    initial_temperature: float = 1.0
    warmup_epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.peak_temperature >= self.initial_temperature > 0:
            raise ValueError("need peak_temperature >= initial_temperature > 0")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")


def sampling_probs(sizes: Sequence[int], temperature: float) -> np.ndarray:
    """q_m proportional to (|D_m| / |D_all|) ** (1 / temperature)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise ValueError("corpus sizes must be positive")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if math.isinf(temperature):
        return np.full(sizes.shape, 1.0 / sizes.size)
    w = (sizes / sizes.sum()) ** (1.0 / temperature)
    return w / w.sum()


def epoch_temperature(epoch: int, cfg: SamplerConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t0, t = cfg.initial_temperature, cfg.peak_temperature
    return min(t, t0 + (epoch / cfg.warmup_epochs) * (t - t0))


def draw_corpora(probs: Sequence[float], n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. corpus indices from the distribution ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("corpus probabilities must be a distribution")
    return rng.choice(len(probs), size=n, p=probs)


def sample_batch(corpora: CorpusSet, probs: Sequence[float], batch_size: int,
                 rng: np.random.Generator) -> Batch:
    """Corpus per slot drawn i.i.d. from ``probs``; sample uniform within it."""
    if len(probs) != len(corpora.corpora):
        raise ValueError("one probability per corpus")
    which = draw_corpora(probs, batch_size, rng)
    picked = []
    for m in which:
        corpus = corpora.corpora[m]
        picked.append(corpus.samples[int(rng.integers(len(corpus)))])
    return collate(picked, corpora.vocab)


def iterate_batches(samples: Sequence[Sample], vocab: Vocab, batch_size: int):
    for i in range(0, len(samples), batch_size):
        yield collate(samples[i: i + batch_size], vocab)
