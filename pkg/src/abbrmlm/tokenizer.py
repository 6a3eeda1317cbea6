"""Character-level vocabulary with one mask token per pinyin initial."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
LETTERS = string.ascii_lowercase
LETTER_TOKENS = tuple(f"[LETTER_{c.upper()}]" for c in LETTERS)
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK) + LETTER_TOKENS

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
LETTER_A_ID = 5
NUM_SPECIAL = len(SPECIAL_TOKENS)  # 31

# A TokenSequence is a 1-D int64 array; there is no implicit padding.
TokenSequence = np.ndarray


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.id_to_token)
        if tokens[:NUM_SPECIAL] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the 31 special tokens in canonical order")
        mapping = {}
        for i, tok in enumerate(tokens):
            if tok in mapping:
                raise ValueError(f"duplicate token {tok!r}")
            if i >= NUM_SPECIAL and len(tok) != 1:
                raise ValueError(f"non-special token {tok!r} must be a single character")
            mapping[tok] = i
        object.__setattr__(self, "id_to_token", tokens)
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def character_ids(self) -> range:
        return range(NUM_SPECIAL, len(self.id_to_token))

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @classmethod
    def from_characters(cls, chars: Iterable[str]) -> "Vocabulary":
        return cls(SPECIAL_TOKENS + tuple(chars))


def build_vocabulary(corpus: Iterable, min_count: int = 1) -> Vocabulary:
    """Collect characters from a corpus of sentences.

    Sentences may be strings or anything with a ``words`` attribute.  Ids are
    assigned specials first, then by descending count, ties by codepoint, so
    the result does not depend on sentence order.
    """
    counts: Counter[str] = Counter()
    n = 0
    for sentence in corpus:
        n += 1
        words = getattr(sentence, "words", None)
        text = "".join(words) if words is not None else str(sentence)
        counts.update(ch for ch in text if not ch.isspace())
    if n == 0:
        raise ValueError("corpus is empty")
    ordered = sorted(
        (ch for ch, c in counts.items() if c >= min_count and ch not in SPECIAL_TOKENS),
        key=lambda ch: (-counts[ch], ord(ch)),
    )
    return Vocabulary.from_characters(ordered)


def encode(vocab: Vocabulary, text: str) -> TokenSequence:
    return np.fromiter((vocab.id_of(ch) for ch in text), dtype=np.int64, count=len(text))


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    return "".join(vocab.id_to_token[int(i)] for i in ids)


def letter_mask_id(vocab: Vocabulary, letter: str) -> int:
    if len(letter) != 1 or letter not in LETTERS:
        raise ValueError(f"letter must be in a..z, got {letter!r}")
    return LETTER_A_ID + LETTERS.index(letter)


def is_letter_mask(token_id) -> bool | np.ndarray:
    return (np.asarray(token_id) >= LETTER_A_ID) & (np.asarray(token_id) < LETTER_A_ID + 26)


def letter_of_mask(token_id: int) -> str:
    if not is_letter_mask(token_id):
        raise ValueError(f"id {token_id} is not a letter-mask token")
    return LETTERS[int(token_id) - LETTER_A_ID]


def save_vocabulary(vocab: Vocabulary, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.id_to_token:
            fh.write(tok + "\n")


def load_vocabulary(path: str | PathLike) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    if tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary(tuple(tokens))
