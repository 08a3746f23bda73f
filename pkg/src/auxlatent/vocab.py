"""Toy vocabulary and the text tokenizer shared by the model and the rewards."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

PAD = "<pad>"
BOS = "<bos>"
ANS = "<ans>"
EOS = "<eos>"
LATENT_START = "<|latent_start|>"
LATENT_PAD = "<|latent_pad|>"
LATENT_END = "<|latent_end|>"
BOX_OPEN = "\\boxed{"
BOX_CLOSE = "}"

SPECIALS = (PAD, BOS, ANS, EOS, LATENT_START, LATENT_PAD, LATENT_END, BOX_OPEN, BOX_CLOSE)
LATENT_TOKENS = frozenset({LATENT_START, LATENT_PAD, LATENT_END})
DIGITS = tuple("0123456789")
LETTERS = tuple("ABCDEFMNPQ")
OPERATORS = ("+", "-", "*", "/", "=", "?", ",")
WORDS = (
    # question words
    "triangle", "base", "height", "midline", "area", "top", "points", "heights",
    "and", "apart", "line", "path", "shortest", "angles", "apex", "angle", "box",
    "by", "surface", "corner", "options",
    # plan grammar
    "connect", "reflect", "drop-perp", "unfold", "parallel",
)

_TOKEN_RE = re.compile(
    r"<\|[a-z_]+\|>|<[a-z]+>|\\boxed\{|[{}]|[A-Za-z][A-Za-z0-9_'\-]*|\d|\S"
)


def tokenize_text(text: str) -> list[str]:
    """Split text into token strings; works on arbitrary text, not just the vocabulary."""
    return _TOKEN_RE.findall(text)


def _glue(prev: str, cur: str) -> bool:
    if prev == BOX_OPEN or cur == BOX_CLOSE:
        return True
    return prev.isdigit() and cur.isdigit()


def join_tokens(tokens: Iterable[str]) -> str:
    out: list[str] = []
    prev = None
    for tok in tokens:
        if prev is not None and not _glue(prev, tok):
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


class Vocabulary:
    def __init__(self, extra_words: Sequence[str] = ()):
        tokens = list(SPECIALS) + list(DIGITS) + list(LETTERS) + list(OPERATORS) + list(WORDS)
        tokens += [w for w in extra_words if w not in tokens]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.ans_id = self.index[ANS]
        self.eos_id = self.index[EOS]
        self.latent_start_id = self.index[LATENT_START]
        self.latent_pad_id = self.index[LATENT_PAD]
        self.latent_end_id = self.index[LATENT_END]
        self.box_open_id = self.index[BOX_OPEN]
        self.box_close_id = self.index[BOX_CLOSE]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in tokenize_text(text):
            if tok not in self.index:
                raise KeyError(f"token {tok!r} is not in the vocabulary")
            ids.append(self.index[tok])
        return ids

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids: Iterable[int]) -> str:
        return join_tokens(self.tokens[int(i)] for i in ids)

    def to_tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def count_latent_blocks(tokens: Sequence[str]) -> int:
    """Number of well-formed start, pad..., end segments (at least one pad)."""
    n = 0
    i = 0
    while i < len(tokens):
        if tokens[i] == LATENT_START:
            j = i + 1
            while j < len(tokens) and tokens[j] == LATENT_PAD:
                j += 1
            if j < len(tokens) and tokens[j] == LATENT_END and j > i + 1:
                n += 1
                i = j + 1
                continue
            i = j
            continue
        i += 1
    return n
