"""Grounding phrases and their deterministic 768-d embeddings.

Grammar (case-insensitive, whitespace-tolerant)::

    a [small|large] {circle|square|triangle} on the {top|middle|bottom} {left|center|right}

The size defaults to ``small``. ``middle center`` is written ``center``
(``on the center``); the long form is accepted on input.

Embeddings stand in for a frozen sentence encoder: each attribute value owns a
fixed Gaussian code vector drawn once from ``vocab_seed``; a phrase embeds as
the L2-normalised sum of its three codes. Text outside the grammar falls back
to a bag of words, where every lowercase token gets its own seeded code.
"""

from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParseError

EMBED_DIM = 768
DEFAULT_VOCAB_SEED = 42

SHAPES = ("circle", "square", "triangle")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
SIZES = ("small", "large")
GRID_POSITIONS = tuple(itertools.product(ROWS, COLS))


@dataclass(frozen=True)
class GroundingPhrase:
    shape_kind: str
    grid_pos: tuple[str, str]  # (row, col)
    size_qualifier: str = "small"

    def __post_init__(self):
        if self.shape_kind not in SHAPES:
            raise ValueError(f"unknown shape {self.shape_kind!r}")
        if tuple(self.grid_pos) not in GRID_POSITIONS:
            raise ValueError(f"unknown grid position {self.grid_pos!r}")
        if self.size_qualifier not in SIZES:
            raise ValueError(f"unknown size {self.size_qualifier!r}")
        object.__setattr__(self, "grid_pos", tuple(self.grid_pos))

    @property
    def row(self) -> int:
        return ROWS.index(self.grid_pos[0])

    @property
    def col(self) -> int:
        return COLS.index(self.grid_pos[1])

    @property
    def position_name(self) -> str:
        if self.grid_pos == ("middle", "center"):
            return "center"
        return f"{self.grid_pos[0]} {self.grid_pos[1]}"

    def __str__(self) -> str:
        return render_phrase(self)


def all_phrases() -> list[GroundingPhrase]:
    """The 54 phrases of the grammar in a fixed order."""
    return [
        GroundingPhrase(shape, pos, size)
        for shape in SHAPES
        for pos in GRID_POSITIONS
        for size in SIZES
    ]


def render_phrase(p: GroundingPhrase) -> str:
    return f"a {p.size_qualifier} {p.shape_kind} on the {p.position_name}"


_TOKEN = re.compile(r"\S+")


def parse_phrase(text: str) -> GroundingPhrase:
    """Parse grammar text into a :class:`GroundingPhrase`.

    Raises :class:`ParseError` carrying the offset of the first token that
    does not fit (offsets index the stripped, lowercased text).
    """
    norm = text.strip().lower()
    tokens = [(m.group(), m.start()) for m in _TOKEN.finditer(norm)]
    pos = 0

    def take(expected: tuple[str, ...], what: str) -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError(f"expected {what}, got end of text", len(norm))
        word, offset = tokens[pos]
        if word not in expected:
            raise ParseError(f"expected {what}, got {word!r}", offset)
        pos += 1
        return word

    take(("a",), "'a'")
    size = "small"
    if pos < len(tokens) and tokens[pos][0] in SIZES:
        size = tokens[pos][0]
        pos += 1
    shape = take(SHAPES, "a shape (" + "|".join(SHAPES) + ")")
    take(("on",), "'on'")
    take(("the",), "'the'")
    row = take(ROWS + ("center",), "a row (top|middle|bottom) or 'center'")
    if row == "center":
        col = "center"
        row = "middle"
    else:
        col = take(COLS, "a column (left|center|right)")
    if pos < len(tokens):
        raise ParseError(f"unexpected trailing text {tokens[pos][0]!r}", tokens[pos][1])
    return GroundingPhrase(shape, (row, col), size)


def canonical(text: str) -> str:
    return render_phrase(parse_phrase(text))


class Vocabulary:
    """Fixed attribute codes for one ``vocab_seed``. Immutable once built."""

    def __init__(self, seed: int = DEFAULT_VOCAB_SEED, dim: int = EMBED_DIM):
        self.seed = seed
        self.dim = dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47]))
        keys = [("shape", s) for s in SHAPES] + [("pos", p) for p in GRID_POSITIONS] + [("size", s) for s in SIZES]
        codes = rng.standard_normal((len(keys), dim))
        codes.setflags(write=False)
        self._codes = dict(zip(keys, codes))

    def code(self, kind: str, value) -> np.ndarray:
        return self._codes[(kind, value)]

    def token_code(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xB0, *words]))
        return rng.standard_normal(self.dim)


@lru_cache(maxsize=8)
def get_vocabulary(seed: int = DEFAULT_VOCAB_SEED) -> Vocabulary:
    return Vocabulary(seed)


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def embed_phrase(p: GroundingPhrase, vocab_seed: int = DEFAULT_VOCAB_SEED) -> np.ndarray:
    vocab = get_vocabulary(vocab_seed)
    total = vocab.code("shape", p.shape_kind) + vocab.code("pos", p.grid_pos) + vocab.code("size", p.size_qualifier)
    return _normalize(total)


def embed_bag_of_words(text: str, vocab_seed: int = DEFAULT_VOCAB_SEED) -> np.ndarray:
    tokens = text.lower().split()
    if not tokens:
        raise ValueError("cannot embed empty text")
    vocab = get_vocabulary(vocab_seed)
    return _normalize(sum(vocab.token_code(t) for t in tokens))


def embed_text(text: str, vocab_seed: int = DEFAULT_VOCAB_SEED) -> np.ndarray:
    """Grammar path when ``text`` parses, bag-of-words otherwise."""
    try:
        phrase = parse_phrase(text)
    except ParseError:
        return embed_bag_of_words(text, vocab_seed)
    return embed_phrase(phrase, vocab_seed)
