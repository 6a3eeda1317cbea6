"""Whole-word letter-mask sampling and batch construction.

Selected words have every character replaced by the mask token of its pinyin
initial (梦想 -> [LETTER_M] [LETTER_X]).  There is no random-token or
keep-original substitution: every selected character is masked.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import SegmentedSentence
from .pinyin import PinyinTable, initial_of
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, Vocabulary, encode, letter_mask_id

IGNORE_INDEX = -100


@dataclass(frozen=True)
class MaskingConfig:
    mask_prob: float = 0.15
    poly_boost: float = 2.0
    seed: int = 0
    # "letter" uses the 26 letter-mask tokens; "single" uses plain [MASK] (ablation).
    mask_style: str = "letter"

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if self.poly_boost < 1.0:
            raise ValueError(f"poly_boost must be >= 1, got {self.poly_boost}")
        if self.mask_style not in ("letter", "single"):
            raise ValueError(f"unknown mask_style {self.mask_style!r}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass
class MaskedSentence:
    """One masked sentence, unframed: position i corresponds to character i."""

    ids: np.ndarray
    targets: np.ndarray
    letters: list[str]

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.targets != IGNORE_INDEX)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    target_ids: np.ndarray
    letter_labels: np.ndarray
    attention_mask: np.ndarray
    # Sentences after word-boundary truncation, in batch order.
    sentences: tuple[SegmentedSentence, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.input_ids.shape

    @property
    def num_masked(self) -> int:
        return int((self.target_ids != IGNORE_INDEX).sum())

    def letter_index_sets(self) -> dict[str, np.ndarray]:
        """Flat indices of masked positions grouped by mask letter."""
        flat = self.letter_labels.ravel()
        return {c: np.flatnonzero(flat == c) for c in sorted(set(flat.tolist()) - {""})}

    def take(self, rows: Sequence[int]) -> "MaskedBatch":
        rows = list(rows)
        return MaskedBatch(
            self.input_ids[rows], self.target_ids[rows], self.letter_labels[rows],
            self.attention_mask[rows],
            tuple(self.sentences[r] for r in rows) if self.sentences else (),
        )


def maskable_words(sentence: SegmentedSentence, table: PinyinTable) -> list[int]:
    return [i for i, w in enumerate(sentence.words) if table.has_readings(w)]


def selection_weights(sentence: SegmentedSentence, config: MaskingConfig,
                      table: PinyinTable) -> np.ndarray:
    """Per-word selection weight; zero for words lacking readings."""
    w = np.zeros(len(sentence.words))
    for i in maskable_words(sentence, table):
        n = len(sentence.words[i])
        w[i] = n * (config.poly_boost if n > 1 else 1.0)
    return w


def draw_order(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Weighted sampling without replacement over the positive-weight items.

    Uses exponential keys: item i gets ``log(u_i) / w_i`` and items are taken in
    descending key order, which draws each next item with probability
    proportional to its weight among those remaining.
    """
    weights = np.asarray(weights, dtype=float)
    u = rng.random(len(weights))
    live = np.flatnonzero(weights > 0)
    keys = np.log(u[live]) / weights[live]
    return live[np.argsort(-keys, kind="stable")]


def select_words(sentence: SegmentedSentence, config: MaskingConfig,
                 rng: np.random.Generator, table: PinyinTable | None = None) -> set[int]:
    """Choose whole words to mask so that about ``mask_prob`` of characters are masked.

    The character budget is ``mask_prob * len(sentence)`` with stochastic
    rounding.  Words are drawn in weighted order and taken while they fit; the
    first word that would overshoot is taken with probability
    ``remaining / len(word)``, which keeps the expected masked count on budget.
    """
    n_chars = len(sentence)
    if n_chars == 0:
        raise ValueError("sentence is empty")
    if table is None:
        from .pinyin import builtin_table
        table = builtin_table()
    target = config.mask_prob * n_chars
    budget = int(np.floor(target))
    # Always draw, so the RNG stream advances identically regardless of budget.
    frac_draw = rng.random()
    if frac_draw < target - budget:
        budget += 1
    order = draw_order(selection_weights(sentence, config, table), rng)
    chosen: set[int] = set()
    masked = 0
    for i in order:
        remaining = budget - masked
        if remaining <= 0:
            break
        n = len(sentence.words[i])
        if n <= remaining:
            chosen.add(int(i))
            masked += n
        else:
            if rng.random() < remaining / n:
                chosen.add(int(i))
            break
    return chosen


def apply_multi_mask(sentence: SegmentedSentence, selected: set[int], table: PinyinTable,
                     vocab: Vocabulary, mask_style: str = "letter") -> MaskedSentence:
    ids = encode(vocab, sentence.text)
    targets = np.full(len(ids), IGNORE_INDEX, dtype=np.int64)
    letters = [""] * len(ids)
    for w_idx, start in enumerate(sentence.word_offsets()):
        if w_idx not in selected:
            continue
        for k, ch in enumerate(sentence.words[w_idx]):
            p = start + k
            letter = initial_of(table, ch)
            targets[p] = ids[p]
            letters[p] = letter
            ids[p] = letter_mask_id(vocab, letter) if mask_style == "letter" else MASK_ID
    return MaskedSentence(ids, targets, letters)


def truncate_to(sentence: SegmentedSentence, max_chars: int) -> SegmentedSentence:
    """Drop trailing words until the sentence fits ``max_chars`` characters."""
    words, total = [], 0
    for w in sentence.words:
        if total + len(w) > max_chars:
            break
        words.append(w)
        total += len(w)
    if len(words) == len(sentence.words):
        return sentence
    return SegmentedSentence(tuple(words), sentence.lineno)


def frame(masked: Sequence[MaskedSentence]) -> tuple[np.ndarray, ...]:
    """Pad and wrap masked sentences in [CLS] ... [SEP]."""
    width = max(len(m.ids) for m in masked) + 2
    b = len(masked)
    input_ids = np.full((b, width), PAD_ID, dtype=np.int64)
    target_ids = np.full((b, width), IGNORE_INDEX, dtype=np.int64)
    letter_labels = np.full((b, width), "", dtype="<U1")
    attention_mask = np.zeros((b, width), dtype=np.int64)
    for r, m in enumerate(masked):
        n = len(m.ids)
        input_ids[r, 0] = CLS_ID
        input_ids[r, 1:n + 1] = m.ids
        input_ids[r, n + 1] = SEP_ID
        target_ids[r, 1:n + 1] = m.targets
        letter_labels[r, 1:n + 1] = m.letters
        attention_mask[r, :n + 2] = 1
    return input_ids, target_ids, letter_labels, attention_mask


def build_batch(sentences: Sequence[SegmentedSentence], config: MaskingConfig,
                table: PinyinTable, vocab: Vocabulary, max_len: int = 128,
                rng: np.random.Generator | None = None) -> MaskedBatch:
    """Mask, frame and pad a list of sentences.

    ``rng`` defaults to a fresh generator seeded from ``config.seed``; pass one
    explicitly to draw different masks across epochs.
    """
    if not sentences:
        raise ValueError("no sentences to batch")
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    rng = config.rng() if rng is None else rng
    kept, masked = [], []
    for s in sentences:
        s = truncate_to(s, max_len - 2)
        selected = select_words(s, config, rng, table) if len(s) else set()
        kept.append(s)
        masked.append(apply_multi_mask(s, selected, table, vocab, config.mask_style))
    return MaskedBatch(*frame(masked), sentences=tuple(kept))


def mask_rate(batch: MaskedBatch) -> float:
    real = int(batch.attention_mask.sum()) - 2 * batch.shape[0]
    if real <= 0:
        warnings.warn("batch has no real characters", RuntimeWarning, stacklevel=2)
        return 0.0
    return batch.num_masked / real
