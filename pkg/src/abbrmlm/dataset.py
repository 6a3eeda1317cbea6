"""Abbreviation test-set construction from segmented corpora.

Each record takes one sentence and picks one eligible word in it to be
replaced by its abbreviation.  A per-word frequency cap keeps the set
diverse, and an optional target mix over word lengths can be requested.
Sentences should not overlap the training corpus; that is up to the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from os import PathLike
from typing import Mapping, Sequence

import numpy as np

from .corpus import SegmentedSentence
from .errors import ShortfallError
from .evaluation import EvalRecord
from .pinyin import PinyinTable, abbreviation_of

BUCKETS = ("1", "2", "3", "4+")

# Function words that make poor targets: their abbreviation is too ambiguous.
STOPWORDS = frozenset(
    "的 了 是 在 和 也 都 就 着 过 吗 呢 吧 啊 呀 哦 嗯 与 及 而 或 被 把 之 其 所 于 以 得 地 么 个 这 那".split()
)

# Length mix of the reference test set: 32.57% / 59.86% / 6.18% / 1.39%.
REFERENCE_LENGTH_WEIGHTS = {"1": 0.3257, "2": 0.5986, "3": 0.0618, "4+": 0.0139}


def length_bucket(word: str) -> str:
    return str(len(word)) if len(word) < 4 else "4+"


@dataclass(frozen=True)
class TestsetConfig:
    target_size: int
    max_word_share: float = 0.004
    length_weights: Mapping[str, float] | None = None
    seed: int = 0

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if not 0 < self.max_word_share <= 1:
            raise ValueError("max_word_share must be in (0, 1]")
        if self.length_weights is not None:
            unknown = set(self.length_weights) - set(BUCKETS)
            if unknown:
                raise ValueError(f"unknown length buckets {sorted(unknown)}")
            if any(w < 0 for w in self.length_weights.values()) or not sum(self.length_weights.values()) > 0:
                raise ValueError("length_weights must be non-negative with a positive sum")

    @property
    def word_cap(self) -> int:
        """Largest number of records any single replaced word may account for."""
        return math.floor(self.max_word_share * self.target_size + 1e-9)


def is_eligible(word: str, table: PinyinTable) -> bool:
    return word not in STOPWORDS and table.has_readings(word)


def bucket_quotas(weights: Mapping[str, float], total: int) -> dict[str, int]:
    """Integer counts per bucket summing to ``total`` (largest remainder)."""
    norm = sum(weights.get(b, 0.0) for b in BUCKETS)
    exact = {b: weights.get(b, 0.0) / norm * total for b in BUCKETS}
    quotas = {b: math.floor(v) for b, v in exact.items()}
    short = total - sum(quotas.values())
    for b in sorted(BUCKETS, key=lambda b: (-(exact[b] - quotas[b]), BUCKETS.index(b)))[:short]:
        quotas[b] += 1
    return quotas


def build_testset(corpus: Sequence[SegmentedSentence], table: PinyinTable,
                  config: TestsetConfig) -> list[EvalRecord]:
    rng = np.random.default_rng(config.seed)
    cap = config.word_cap
    if cap < 1:
        raise ShortfallError(config.target_size, 0)
    quotas = bucket_quotas(config.length_weights, config.target_size) if config.length_weights else None
    used: dict[str, int] = {}
    records: list[EvalRecord] = []
    for idx in rng.permutation(len(corpus)):
        if len(records) == config.target_size:
            break
        s = corpus[int(idx)]
        options = [i for i, w in enumerate(s.words)
                   if used.get(w, 0) < cap and is_eligible(w, table)]
        if quotas is not None:
            options = [i for i in options if quotas[length_bucket(s.words[i])] > 0]
        if not options:
            continue
        if quotas is not None:
            present = sorted({length_bucket(s.words[i]) for i in options}, key=BUCKETS.index)
            p = np.array([quotas[b] for b in present], dtype=float)
            bucket = present[rng.choice(len(present), p=p / p.sum())]
            options = [i for i in options if length_bucket(s.words[i]) == bucket]
        choice = options[int(rng.integers(len(options)))]
        word = s.words[choice]
        used[word] = used.get(word, 0) + 1
        if quotas is not None:
            quotas[length_bucket(word)] -= 1
        records.append(EvalRecord(s.words, choice, abbreviation_of(table, word)))
    if len(records) < config.target_size:
        raise ShortfallError(config.target_size, len(records))
    return records


@dataclass(frozen=True)
class TestsetStats:
    total: int
    counts: dict[str, int]     # per length bucket
    distinct: dict[str, int]   # distinct replaced words per bucket
    distinct_total: int

    __test__ = False

    @property
    def monosyllabic(self) -> int:
        return self.counts["1"]

    @property
    def polysyllabic(self) -> int:
        return self.total - self.counts["1"]

    def rate(self, bucket: str) -> float:
        return self.counts[bucket] / self.total

    def columns(self) -> list[tuple[str, float, int, int]]:
        """(column, rate, count, distinct words) in reference-table column order."""
        cols = [("Total", 1.0, self.total, self.distinct_total),
                ("Monosyllabic", self.rate("1"), self.counts["1"], self.distinct["1"])]
        for b in BUCKETS[1:]:
            cols.append((b, self.rate(b), self.counts[b], self.distinct[b]))
        return cols

    def to_dict(self) -> dict:
        return {name: {"rate": rate, "count": count, "distinct_words": distinct}
                for name, rate, count, distinct in self.columns()}

    def format_table(self) -> str:
        cols = self.columns()
        head = f"{'Word Length':<26}" + "".join(f"{c[0]:>14}" for c in cols)
        rows = [
            f"{'Rate':<26}" + "".join(f"{100 * c[1]:>13.2f}%" for c in cols),
            f"{'Count':<26}" + "".join(f"{c[2]:>14,}" for c in cols),
            f"{'Different Replaced Words':<26}" + "".join(f"{c[3]:>14,}" for c in cols),
        ]
        return "\n".join([head, *rows])


def stats(records: Sequence[EvalRecord]) -> TestsetStats:
    if not records:
        raise ValueError("no records")
    counts = {b: 0 for b in BUCKETS}
    words: dict[str, set[str]] = {b: set() for b in BUCKETS}
    for r in records:
        b = length_bucket(r.target)
        counts[b] += 1
        words[b].add(r.target)
    return TestsetStats(len(records), counts, {b: len(words[b]) for b in BUCKETS},
                        len(set().union(*words.values())))


def write_review_file(records: Sequence[EvalRecord], path: str | PathLike) -> None:
    """TSV for manual ambiguity review: abbreviated sentence, target, letters."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index\tabbreviated\ttarget\tletters\n")
        for i, r in enumerate(records):
            words = list(r.words)
            words[r.word_index] = "{" + (r.abbreviation or "") + "}"
            fh.write(f"{i}\t{''.join(words)}\t{r.target}\t{r.abbreviation}\n")
