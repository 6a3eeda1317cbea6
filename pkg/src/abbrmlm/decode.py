"""Beam-search conversion of letter-mask spans into ranked words.

Positions of a span are filled left to right, keeping the ``beam_size`` best
partial words by accumulated log-probability.  By default every position is
scored from one forward pass over the masked sentence.  With ``refine=True``
each step re-runs the model with the characters chosen so far written back
into the sequence, so later positions are conditioned on earlier choices.

Refinement shows the model partially revealed words, which whole-word masking
never produces during training; on small models it ranks worse than the
single-pass scores, hence the default.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import AbbreviationParseError, NoCandidateError
from .model.modules import MaskedLM
from .pinyin import PinyinTable
from .tokenizer import (
    CLS_ID,
    MASK_ID,
    SEP_ID,
    Vocabulary,
    decode,
    encode,
    is_letter_mask,
    letter_mask_id,
    letter_of_mask,
)


@dataclass(frozen=True)
class DecodeOptions:
    beam_size: int = 16
    topk: int = 10
    hard_filter: bool = False
    # Re-run the model after fixing each position (conditional refinement).
    refine: bool = False

    def __post_init__(self):
        if self.beam_size < 1 or self.topk < 1:
            raise ValueError("beam_size and topk must be >= 1")


@dataclass
class ConversionQuery:
    tokens: np.ndarray
    spans: list[tuple[int, int]]
    options: DecodeOptions = field(default_factory=DecodeOptions)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not self.spans:
            raise ValueError("query has no spans")
        covered: set[int] = set()
        for start, length in self.spans:
            if length < 1 or start < 0 or start + length > len(self.tokens):
                raise ValueError(f"span ({start}, {length}) out of range")
            positions = set(range(start, start + length))
            if positions & covered:
                raise ValueError("spans overlap")
            covered |= positions
            if not is_letter_mask(self.tokens[start:start + length]).all():
                raise ValueError(f"span ({start}, {length}) contains a non-letter-mask token")

    def letters(self, span: tuple[int, int]) -> str:
        start, length = span
        return "".join(letter_of_mask(t) for t in self.tokens[start:start + length])


class Candidate(NamedTuple):
    word: str
    score: float


@dataclass
class RankedCandidates:
    spans: list[tuple[int, int]]
    candidates: list[list[Candidate]]

    def __getitem__(self, i: int) -> list[Candidate]:
        return self.candidates[i]

    def __len__(self) -> int:
        return len(self.candidates)

    def words(self, i: int = 0) -> list[str]:
        return [c.word for c in self.candidates[i]]


def candidate_ids(vocab: Vocabulary, table: PinyinTable, letter: str | None) -> np.ndarray:
    """Character ids a position may take; specials and [UNK] never qualify."""
    ids = np.arange(vocab.character_ids.start, vocab.character_ids.stop, dtype=np.int64)
    if letter is None:
        return ids
    keep = [i for i in ids if (ch := vocab.id_to_token[i]) in table
            and table.default_reading(ch)[0] == letter]
    return np.asarray(keep, dtype=np.int64)


@torch.no_grad()
def _position_logprobs(model: MaskedLM, seqs: np.ndarray, pos: int) -> np.ndarray:
    ids = torch.as_tensor(seqs, dtype=torch.long)
    out = model(ids, torch.ones_like(ids))[:, pos, :]
    return out.to(torch.float64).numpy()


def _model_view(model: MaskedLM, tokens: np.ndarray) -> np.ndarray:
    """Input the model expects: single-mask models see [MASK] for every letter mask."""
    if model.config.mask_style == "single":
        tokens = tokens.copy()
        tokens[is_letter_mask(tokens)] = MASK_ID
    return tokens


def _top_extensions(logp: np.ndarray, allowed: np.ndarray, k: int) -> list[tuple[float, int]]:
    scores = logp[allowed]
    order = np.lexsort((allowed, -scores))[:k]
    return [(float(scores[i]), int(allowed[i])) for i in order]


def beam_search_span(model: MaskedLM, tokens: np.ndarray, span: tuple[int, int],
                     allowed: Sequence[np.ndarray], options: DecodeOptions) -> list[tuple[tuple[int, ...], float]]:
    """Return surviving beams as (token ids, accumulated log-prob), best first."""
    start, length = span
    positions = list(range(start, start + length))
    base = _model_view(model, tokens)
    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    fixed = None if options.refine else _position_logprobs_all(model, base, positions)
    for j, pos in enumerate(positions):
        if fixed is not None:
            rows = np.repeat(fixed[j][None], len(beams), axis=0)
        else:
            seqs = np.repeat(base[None], len(beams), axis=0)
            for b, (toks, _) in enumerate(beams):
                seqs[b, positions[:j]] = toks
            rows = _position_logprobs(model, seqs, pos)
        pool = []
        for b, (toks, score) in enumerate(beams):
            for s, tok in _top_extensions(rows[b], allowed[j], options.beam_size):
                pool.append((toks + (tok,), score + s))
        pool.sort(key=lambda item: (-item[1], item[0]))
        beams = pool[:options.beam_size]
    return beams


@torch.no_grad()
def _position_logprobs_all(model: MaskedLM, seq: np.ndarray, positions: list[int]) -> np.ndarray:
    ids = torch.as_tensor(seq[None], dtype=torch.long)
    out = model(ids, torch.ones_like(ids))[0, positions, :]
    return out.to(torch.float64).numpy()


def normalized_scores(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def convert(model: MaskedLM, query: ConversionQuery, vocab: Vocabulary,
            table: PinyinTable) -> RankedCandidates:
    opts = query.options
    tokens = query.tokens.copy()
    results = []
    was_training = model.training
    model.eval()
    try:
        for span in query.spans:
            letters = query.letters(span)
            allowed = []
            for j, letter in enumerate(letters):
                ids = candidate_ids(vocab, table, letter if opts.hard_filter else None)
                if ids.size == 0:
                    raise NoCandidateError(span, span[0] + j, letter)
                allowed.append(ids)
            beams = beam_search_span(model, tokens, span, allowed, opts)
            probs = normalized_scores([s for _, s in beams])
            results.append([Candidate(decode(vocab, toks), float(p))
                            for (toks, _), p in zip(beams[:opts.topk], probs[:opts.topk])])
            start, length = span
            tokens[start:start + length] = beams[0][0]
    finally:
        model.train(was_training)
    return RankedCandidates(list(query.spans), results)


_SPAN = re.compile(r"\{([^{}]*)\}")


def parse_abbreviated_text(text: str) -> tuple[str, list[tuple[int, str]]]:
    """Split ``"我{fq}了"`` into plain pieces and (char offset, letters) spans.

    Returns the text with each span replaced by its letters and the list of
    spans; offsets index into the returned text.
    """
    spans, pieces, pos, last = [], [], 0, 0
    for m in _SPAN.finditer(text):
        plain = text[last:m.start()]
        if "{" in plain or "}" in plain:
            raise AbbreviationParseError(f"unbalanced brace in {text!r}")
        letters = m.group(1)
        if not letters:
            raise AbbreviationParseError("empty abbreviation {}")
        if not (letters.isascii() and letters.isalpha()):
            raise AbbreviationParseError(f"abbreviation {letters!r} must be ASCII letters a-z")
        letters = letters.lower()
        pieces.append(plain)
        pos += len(plain)
        spans.append((pos, letters))
        pieces.append(letters)
        pos += len(letters)
        last = m.end()
    tail = text[last:]
    if "{" in tail or "}" in tail:
        raise AbbreviationParseError(f"unbalanced brace in {text!r}")
    if not spans:
        raise AbbreviationParseError(f"no {{letters}} abbreviation found in {text!r}")
    pieces.append(tail)
    return "".join(pieces), spans


def build_query(vocab: Vocabulary, text: str, spans: Sequence[tuple[int, str]],
                options: DecodeOptions = DecodeOptions()) -> ConversionQuery:
    """Frame ``text`` in [CLS]/[SEP], putting letter masks at each (offset, letters) span."""
    ids = encode(vocab, text)
    out_spans = []
    for offset, letters in spans:
        for k, c in enumerate(letters):
            ids[offset + k] = letter_mask_id(vocab, c)
        out_spans.append((offset + 1, len(letters)))
    framed = np.concatenate([[CLS_ID], ids, [SEP_ID]]).astype(np.int64)
    return ConversionQuery(framed, out_spans, options)


def convert_text(model: MaskedLM, text: str, vocab: Vocabulary, table: PinyinTable,
                 options: DecodeOptions = DecodeOptions()) -> RankedCandidates:
    plain, spans = parse_abbreviated_text(text)
    return convert(model, build_query(vocab, plain, spans, options), vocab, table)
