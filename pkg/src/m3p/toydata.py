"""Synthetic parallel scene corpora with rendered images.

A scene is one to three coloured shapes, each on its own cell of a square
grid whose cell size equals the patch size, so one patch carries one object.
Every language describes the scene with its own disjoint word inventory and
its own slot order; all languages are therefore mutually parallel and the
image determines every content word.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path

import numpy as np

from .data import CorpusSet, Vocab, load_corpus_dir, write_ppm

LANG_NAMES = ("En", "De", "Fr", "Cs")

COLORS = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 80, 230),
    "yellow": (240, 220, 40),
    "purple": (160, 50, 200),
    "cyan": (40, 220, 220),
    "orange": (245, 140, 30),
    "white": (235, 235, 235),
}
SHAPES = ("square", "bar", "pillar", "dot", "ring", "cross")
SLOTS = ("color", "shape", "cell")

_EN_ROWS = ("top", "upper", "lower", "bottom")
_EN_COLS = ("left", "midleft", "midright", "right")
_BASE_ORDERS = (
    ("color", "shape", "cell"),
    ("shape", "color", "cell"),
    ("cell", "color", "shape"),
    ("shape", "cell", "color"),
)


def language_names(n: int) -> list[str]:
    return [LANG_NAMES[i] if i < len(LANG_NAMES) else f"L{i}" for i in range(n)]


def slot_order(lang_index: int) -> tuple[str, ...]:
    if lang_index < len(_BASE_ORDERS):
        return _BASE_ORDERS[lang_index]
    perms = list(permutations(SLOTS))
    return perms[lang_index % len(perms)]


@dataclass(frozen=True)
class Obj:
    color: int
    shape: int
    row: int
    col: int


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple[Obj, ...]

    @property
    def signature(self) -> tuple:
        return tuple((o.color, o.shape, o.row, o.col) for o in self.objects)


class Lexicon:
    """Per-language words for every colour, shape, grid cell, and "and".

    A grid cell is named by a single word so that no two-word fragment of a
    description is shared by chance across unrelated scenes.
    """

    def __init__(self, n_langs: int, grid: int):
        self.names = language_names(n_langs)
        self.grid = grid
        self.words: list[dict[str, list[str]]] = []
        used: set[str] = set()
        for i in range(n_langs):
            entry = self._english(grid) if i == 0 else self._pseudo(i, grid, used)
            used.update(w for ws in entry.values() for w in ws)
            self.words.append(entry)

    @staticmethod
    def _english(grid: int) -> dict[str, list[str]]:
        if grid == 4:
            cells = [r + c for r in _EN_ROWS for c in _EN_COLS]
        else:
            cells = [f"r{r}c{c}" for r in range(grid) for c in range(grid)]
        return {"color": list(COLORS), "shape": list(SHAPES), "cell": cells, "and": ["and"]}

    @staticmethod
    def _pseudo(i: int, grid: int, used: set[str]) -> dict[str, list[str]]:
        rng = np.random.Generator(np.random.Philox(key=1000 + i))
        consonants = list("bdfgklmnprstvz")
        vowels = list("aeiou")
        sizes = {"color": len(COLORS), "shape": len(SHAPES), "cell": grid * grid, "and": 1}
        out: dict[str, list[str]] = {}
        for slot, count in sizes.items():
            words = []
            while len(words) < count:
                n_syll = int(rng.integers(2, 4))
                w = "".join(consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
                            for _ in range(n_syll))
                if w not in used and w not in words:
                    words.append(w)
                    used.add(w)
            out[slot] = words
        return out

    def all_words(self) -> list[str]:
        return [w for entry in self.words for slot in (*SLOTS, "and") for w in entry[slot]]

    def describe(self, scene: Scene, lang_index: int) -> str:
        entry = self.words[lang_index]
        order = slot_order(lang_index)
        phrases = []
        for o in scene.objects:
            value = {"color": o.color, "shape": o.shape, "cell": o.row * self.grid + o.col}
            phrases.append(" ".join(entry[s][value[s]] for s in order))
        return f" {entry['and'][0]} ".join(phrases)


def shape_mask(shape: int, patch: int) -> np.ndarray:
    m = np.zeros((patch, patch), dtype=bool)
    lo, hi = patch // 4, patch - patch // 4
    name = SHAPES[shape]
    if name == "square":
        m[:, :] = True
    elif name == "bar":
        m[lo:hi, :] = True
    elif name == "pillar":
        m[:, lo:hi] = True
    elif name == "dot":
        m[lo:hi, lo:hi] = True
    elif name == "ring":
        m[:, :] = True
        m[1:-1, 1:-1] = False
    else:
        mid = slice(patch // 2 - 1, patch // 2 + 1)
        m[mid, :] = True
        m[:, mid] = True
    return m


def render_scene(scene: Scene, img_size: int, patch: int) -> np.ndarray:
    """uint8 H x W x 3 image, black background, one object per grid cell."""
    img = np.zeros((img_size, img_size, 3), dtype=np.uint8)
    rgb = list(COLORS.values())
    for o in scene.objects:
        cell = img[o.row * patch:(o.row + 1) * patch, o.col * patch:(o.col + 1) * patch]
        cell[shape_mask(o.shape, patch)] = rgb[o.color]
    return img


def random_scenes(count: int, grid: int, rng: np.random.Generator, max_objects: int = 3,
                  exclude: set | None = None) -> list[Scene]:
    seen = set() if exclude is None else set(exclude)
    scenes: list[Scene] = []
    cells = grid * grid
    while len(scenes) < count:
        n = int(rng.integers(1, min(max_objects, cells) + 1))
        where = sorted(rng.choice(cells, size=n, replace=False).tolist())
        objs = tuple(Obj(int(rng.integers(len(COLORS))), int(rng.integers(len(SHAPES))), c // grid, c % grid)
                     for c in where)
        sig = tuple((o.color, o.shape, o.row, o.col) for o in objs)
        if sig in seen:
            continue
        seen.add(sig)
        scenes.append(Scene(-1, objs))
    return scenes


def generate_toy_corpus(out_dir, langs: int = 4, size: int = 200, img: int = 32, patch: int = 8,
                        seed: int = 17, test_size: int | None = None) -> dict:
    """Write vocab, images, and train/test JSONL corpora under ``out_dir``.

    Directions touching the first language hold all ``size`` scenes; the other
    directions hold the first half, so corpus sizes are deliberately unequal.
    """
    if langs < 2:
        raise ValueError("need at least two languages")
    if img % patch or patch < 4:
        raise ValueError("patch must divide the image size and be >= 4")
    grid = img // patch
    test_size = max(10, size // 5) if test_size is None else test_size
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=seed))

    lex = Lexicon(langs, grid)
    vocab = Vocab(lex.names, lex.all_words())
    vocab.save(out / "vocab.txt")

    train = random_scenes(size, grid, rng)
    test = random_scenes(test_size, grid, rng, exclude={s.signature for s in train})
    scenes = [Scene(i, s.objects) for i, s in enumerate(train + test)]
    for s in scenes:
        write_ppm(out / "images" / f"scene_{s.scene_id:05d}.ppm", render_scene(s, img, patch))

    half = (size + 1) // 2
    for split, pool in (("train", scenes[:size]), ("test", scenes[size:])):
        d = out / split
        d.mkdir(exist_ok=True)
        for i in range(langs):
            for j in range(langs):
                if i == j:
                    continue
                chosen = pool if split == "test" or 0 in (i, j) else pool[:half]
                lines = [json.dumps({
                    "src_lang": lex.names[i], "tgt_lang": lex.names[j],
                    "src_text": lex.describe(s, i), "tgt_text": lex.describe(s, j),
                    "image": f"../images/scene_{s.scene_id:05d}.ppm", "scene_id": s.scene_id,
                }) for s in chosen]
                (d / f"{lex.names[i]}-{lex.names[j]}.jsonl").write_text("\n".join(lines) + "\n")

    meta = {"langs": lex.names, "size": size, "test_size": test_size, "img": img, "patch": patch,
            "seed": seed, "scenes": [[list(o) for o in s.signature] for s in scenes]}
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return meta


def load_toy_splits(data_dir, patch: int) -> tuple[CorpusSet, CorpusSet]:
    d = Path(data_dir)
    vocab = Vocab.load(d / "vocab.txt")
    return load_corpus_dir(d / "train", vocab, patch), load_corpus_dir(d / "test", vocab, patch)
