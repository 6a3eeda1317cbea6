"""Pre-segmented corpora and a dictionary-based segmenter for raw text.

Corpus files hold one sentence per line with words separated by spaces::

    我们 喜欢 音乐
"""

from __future__ import annotations

from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Iterator


@dataclass(frozen=True)
class SegmentedSentence:
    words: tuple[str, ...]
    lineno: int = 0

    def __post_init__(self):
        words = tuple(self.words)
        if any(not w for w in words):
            raise ValueError("segmented sentence contains an empty word")
        object.__setattr__(self, "words", words)

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> "SegmentedSentence":
        return cls(tuple(line.split()), lineno)

    @property
    def text(self) -> str:
        return "".join(self.words)

    def __len__(self) -> int:
        return sum(len(w) for w in self.words)

    def word_offsets(self) -> list[int]:
        """Character offset of each word's first character."""
        offsets, pos = [], 0
        for w in self.words:
            offsets.append(pos)
            pos += len(w)
        return offsets

    def to_line(self) -> str:
        return " ".join(self.words)


def iter_corpus(lines: Iterable[str]) -> Iterator[SegmentedSentence]:
    for lineno, line in enumerate(lines, start=1):
        if line.strip():
            yield SegmentedSentence.from_line(line, lineno)


def read_corpus(path: str | PathLike) -> list[SegmentedSentence]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_corpus(fh))


def write_corpus(sentences: Iterable[SegmentedSentence], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(s.to_line() + "\n")


class GreedySegmenter:
    """Forward maximum matching against a user-supplied word list.

    Characters that start no dictionary word become single-character words.
    """

    def __init__(self, words: Iterable[str]):
        self.words = frozenset(w for w in words if w)
        self.max_len = max((len(w) for w in self.words), default=1)

    def __call__(self, text: str) -> list[str]:
        out = []
        i, n = 0, len(text)
        while i < n:
            if text[i].isspace():
                i += 1
                continue
            for k in range(min(self.max_len, n - i), 0, -1):
                piece = text[i:i + k]
                if k == 1 or piece in self.words:
                    out.append(piece)
                    i += k
                    break
        return out

    def segment(self, text: str, lineno: int = 0) -> SegmentedSentence:
        return SegmentedSentence(tuple(self(text)), lineno)
