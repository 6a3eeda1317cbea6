"""Character to pinyin lookup.

The table file is a UTF-8 TSV, one character per line::

    暴\tbao
    体\tti,ben,cui

Readings are toneless lowercase syllables; the first one listed is the default
reading, used for abbreviation and for pinyin-level scoring.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from os import PathLike
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import MissingReadingError, PinyinParseError

_SYLLABLE = re.compile(r"[a-z]+")

_CJK_RANGES = (
    (0x3007, 0x3007),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0x20000, 0x3134F),
)


def is_cjk(ch: str) -> bool:
    if len(ch) != 1:
        return False
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


@dataclass(frozen=True)
class PinyinTable:
    """Immutable mapping from character to its ordered readings."""

    entries: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __contains__(self, ch: str) -> bool:
        return ch in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def readings(self, ch: str) -> tuple[str, ...]:
        try:
            return self.entries[ch]
        except KeyError:
            raise MissingReadingError(ch) from None

    def default_reading(self, ch: str) -> str:
        return self.readings(ch)[0]

    def has_readings(self, word: Iterable[str]) -> bool:
        return all(ch in self.entries for ch in word)


def parse_pinyin_table(lines: Iterable[str]) -> PinyinTable:
    entries: dict[str, tuple[str, ...]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise PinyinParseError(lineno, "missing tab separator")
        ch, _, rest = line.partition("\t")
        if not is_cjk(ch):
            raise PinyinParseError(lineno, f"key {ch!r} is not a single CJK character")
        syllables = [s.strip() for s in rest.split(",")]
        if not rest.strip() or any(not s for s in syllables):
            raise PinyinParseError(lineno, f"empty syllable list for {ch!r}")
        for s in syllables:
            if not _SYLLABLE.fullmatch(s):
                raise PinyinParseError(lineno, f"syllable {s!r} is not lowercase ASCII")
        if ch in entries:
            raise PinyinParseError(lineno, f"duplicate entry for {ch!r}")
        entries[ch] = tuple(syllables)
    return PinyinTable(entries)


def load_pinyin_table(path: str | PathLike) -> PinyinTable:
    with open(path, encoding="utf-8") as fh:
        return parse_pinyin_table(fh)


def dump_pinyin_table(table: PinyinTable, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ch, syllables in table.entries.items():
            fh.write(f"{ch}\t{','.join(syllables)}\n")


_BUILTIN: PinyinTable | None = None


def builtin_table() -> PinyinTable:
    """The bundled table (GB2312 character set)."""
    global _BUILTIN
    if _BUILTIN is None:
        text = resources.files("abbrmlm").joinpath("data/pinyin.tsv").read_text(encoding="utf-8")
        _BUILTIN = parse_pinyin_table(text.splitlines())
    return _BUILTIN


def initial_of(table: PinyinTable, ch: str) -> str:
    return table.default_reading(ch)[0]


def _check_word(word: str) -> None:
    if not word:
        raise ValueError("word must be non-empty")


def abbreviation_of(table: PinyinTable, word: str) -> str:
    """First letters of each character's default reading, e.g. 暴力 -> "bl"."""
    _check_word(word)
    return "".join(initial_of(table, ch) for ch in word)


def full_pinyin_of(table: PinyinTable, word: str) -> list[str]:
    _check_word(word)
    return [table.default_reading(ch) for ch in word]
