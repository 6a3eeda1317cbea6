"""Ranking metrics, per-split evaluation reports, throughput and routing export."""

from __future__ import annotations

import csv
import json
import logging
import resource
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .decode import DecodeOptions, RankedCandidates, build_query, convert
from .errors import DataError, MissingReadingError
from .masking import MaskedBatch
from .model.modules import MaskedLM
from .pinyin import PinyinTable, abbreviation_of, full_pinyin_of
from .tokenizer import Vocabulary, is_letter_mask

log = logging.getLogger(__name__)

MISS = None
KS = (1, 5, 10)
SPLITS = ("total", "monosyllabic", "polysyllabic", "len1", "len2", "len3", "len4+")


def mrr_at_k(ranks: Sequence[int | None], k: int) -> float:
    """Mean over records of 1/rank if rank <= k, else 0.  ``None`` marks a miss."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if len(ranks) == 0:
        raise ValueError("no ranks given")
    total = 0.0
    for r in ranks:
        if r is MISS:
            continue
        if r < 1:
            raise ValueError(f"rank must be >= 1, got {r}")
        if r <= k:
            total += 1.0 / r
    return total / len(ranks)


def rank_of_target(candidates: Sequence, target: str) -> int | None:
    for i, c in enumerate(candidates, start=1):
        if _word(c) == target:
            return i
    return MISS


def pinyin_rank_of_target(candidates: Sequence, target: str, table: PinyinTable) -> int | None:
    """Rank of the first candidate whose full toneless pinyin equals the target's."""
    gold = full_pinyin_of(table, target)
    for i, c in enumerate(candidates, start=1):
        word = _word(c)
        try:
            if full_pinyin_of(table, word) == gold:
                return i
        except MissingReadingError as exc:
            log.debug("candidate %r counted as non-match: %s", word, exc)
    return MISS


def _word(c) -> str:
    return c if isinstance(c, str) else c[0]


@dataclass(frozen=True)
class EvalRecord:
    """One test sentence with a single word to be recovered from its abbreviation."""

    words: tuple[str, ...]
    word_index: int
    abbreviation: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if not 0 <= self.word_index < len(self.words):
            raise ValueError(f"span_word_index {self.word_index} out of range")

    @property
    def target(self) -> str:
        return self.words[self.word_index]

    @property
    def span(self) -> tuple[int, int]:
        start = sum(len(w) for w in self.words[:self.word_index])
        return start, len(self.target)

    @property
    def text(self) -> str:
        return "".join(self.words)

    @property
    def category(self) -> str:
        return "monosyllabic" if len(self.target) == 1 else "polysyllabic"

    @property
    def length_bucket(self) -> str:
        n = len(self.target)
        return f"len{n}" if n < 4 else "len4+"

    def letters(self, table: PinyinTable) -> str:
        letters = abbreviation_of(table, self.target)
        if self.abbreviation is not None and self.abbreviation != letters:
            raise DataError(f"abbreviation {self.abbreviation!r} does not match target "
                            f"{self.target!r} ({letters!r})")
        return letters

    def to_json(self) -> dict:
        d = {"text": " ".join(self.words), "span_word_index": self.word_index, "target": self.target}
        if self.abbreviation is not None:
            d["abbreviation"] = self.abbreviation
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "EvalRecord":
        words = tuple(obj["text"].split())
        rec = cls(words, int(obj["span_word_index"]), obj.get("abbreviation"))
        if rec.target != obj["target"]:
            raise DataError(f"target {obj['target']!r} is not word {rec.word_index} of {obj['text']!r}")
        return rec


def read_testset(path: str | PathLike) -> list[EvalRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(EvalRecord.from_json(json.loads(line)))
            except (KeyError, ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


def write_testset(records: Iterable[EvalRecord], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def record_query(record: EvalRecord, vocab: Vocabulary, table: PinyinTable,
                 options: DecodeOptions):
    start, _ = record.span
    return build_query(vocab, record.text, [(start, record.letters(table))], options)


@dataclass
class EvalReport:
    word: dict[str, dict[int, float | None]]
    pinyin: dict[str, dict[int, float | None]]
    counts: dict[str, int]
    rejected: list[str] = field(default_factory=list)
    ranks: list[tuple[int | None, int | None]] = field(default_factory=list)

    @property
    def accuracy(self) -> float | None:
        return self.word["total"][1]

    def to_dict(self) -> dict:
        def block(d):
            return {s: {f"mrr@{k}": v for k, v in d[s].items()} for s in SPLITS}
        return {"word": block(self.word), "pinyin": block(self.pinyin),
                "accuracy": self.accuracy, "counts": self.counts, "rejected": self.rejected}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)

    def format_table(self) -> str:
        head = f"{'split':<14}{'n':>7}" + "".join(f"{f'MRR@{k}':>9}" for k in KS) \
            + "".join(f"{f'py@{k}':>9}" for k in KS)
        lines = [head, "-" * len(head)]
        for s in SPLITS:
            cells = [self.word[s][k] for k in KS] + [self.pinyin[s][k] for k in KS]
            lines.append(f"{s:<14}{self.counts[s]:>7}" + "".join(
                f"{'-':>9}" if v is None else f"{100 * v:>9.2f}" for v in cells))
        if self.rejected:
            lines.append(f"rejected records: {len(self.rejected)}")
        return "\n".join(lines)


def _split_members(records: Sequence[EvalRecord]) -> dict[str, list[int]]:
    members = {s: [] for s in SPLITS}
    for i, r in enumerate(records):
        members["total"].append(i)
        members[r.category].append(i)
        members[r.length_bucket].append(i)
    return members


def report_from_ranks(records: Sequence[EvalRecord], word_ranks, pinyin_ranks,
                      rejected: list[str] | None = None) -> EvalReport:
    members = _split_members(records)

    def table(ranks):
        out = {}
        for s in SPLITS:
            sub = [ranks[i] for i in members[s]]
            out[s] = {k: (mrr_at_k(sub, k) if sub else None) for k in KS}
        return out

    return EvalReport(table(word_ranks), table(pinyin_ranks),
                      {s: len(members[s]) for s in SPLITS}, rejected or [],
                      list(zip(word_ranks, pinyin_ranks)))


def evaluate(model: MaskedLM, records: Sequence[EvalRecord], vocab: Vocabulary,
             table: PinyinTable, options: DecodeOptions = DecodeOptions()) -> EvalReport:
    """Decode every record and report word- and pinyin-level MRR per split.

    Records whose letters disagree with their target (or whose target lacks a
    reading) are skipped and listed in ``rejected``.
    """
    if not records:
        raise ValueError("no records to evaluate")
    kept, word_ranks, pinyin_ranks, rejected = [], [], [], []
    for i, rec in enumerate(records):
        try:
            query = record_query(rec, vocab, table, options)
        except DataError as exc:
            rejected.append(f"record {i}: {exc}")
            continue
        cands = convert(model, query, vocab, table)[0]
        kept.append(rec)
        word_ranks.append(rank_of_target(cands, rec.target))
        pinyin_ranks.append(pinyin_rank_of_target(cands, rec.target, table))
    if not kept:
        raise DataError("every record was rejected")
    return report_from_ranks(kept, word_ranks, pinyin_ranks, rejected)


@dataclass(frozen=True)
class BenchResult:
    qps: float
    queries: int
    seconds: float
    concurrency: int
    param_count: int
    param_bytes: int
    peak_rss_bytes: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bench_qps(model: MaskedLM, records: Sequence[EvalRecord], vocab: Vocabulary,
              table: PinyinTable, warmup: int = 3, duration: float = 10.0,
              options: DecodeOptions = DecodeOptions(), concurrency: int = 1) -> BenchResult:
    """Fully decoded queries per wall-clock second, cycling through ``records``."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    queries = [record_query(r, vocab, table, options) for r in records]
    if not queries:
        raise ValueError("no records to benchmark")
    model.eval()
    for i in range(warmup):
        convert(model, queries[i % len(queries)], vocab, table)

    lock = threading.Lock()
    counter = [0]
    deadline = time.perf_counter() + duration

    def client(offset: int) -> int:
        done = 0
        while time.perf_counter() < deadline:
            convert(model, queries[(offset + done * concurrency) % len(queries)], vocab, table)
            done += 1
        with lock:
            counter[0] += done
        return done

    start = time.perf_counter()
    if concurrency == 1:
        client(0)
    else:
        with ThreadPoolExecutor(concurrency) as pool:
            list(pool.map(client, range(concurrency)))
    elapsed = time.perf_counter() - start
    n_params = model.num_parameters()
    n_bytes = sum(p.numel() * p.element_size() for p in model.parameters())
    # ru_maxrss is in KiB on Linux.
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return BenchResult(counter[0] / elapsed, counter[0], elapsed, concurrency, n_params, n_bytes, peak)


ROUTING_COLUMNS = ("token_id", "is_letter_mask", "experts", "router_weights", "input", "output")


def _vec(v: np.ndarray) -> str:
    return " ".join(f"{x:.8g}" for x in v.tolist())


@torch.no_grad()
def export_routing_stats(model: MaskedLM, batch: MaskedBatch, layers: Sequence[int],
                         path: str | PathLike) -> list[Path]:
    """Write one CSV per MoE layer with each real token's routing and features.

    ``path`` is a directory; files are named ``routing_layer{index}.csv``.
    Vector columns hold space-separated floats.
    """
    moe = model.moe_layers()
    for idx in layers:
        if idx not in moe:
            raise ValueError(f"layer {idx} is not an MoE layer (MoE layers: {sorted(moe)})")
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    for idx in layers:
        moe[idx].capture = []
    was_training = model.training
    model.eval()
    try:
        model(torch.as_tensor(batch.input_ids), torch.as_tensor(batch.attention_mask))
        records = {idx: moe[idx].capture[-1] for idx in layers}
    finally:
        for idx in layers:
            moe[idx].capture = None
        model.train(was_training)
    flat_ids = batch.input_ids.reshape(-1)
    real = np.flatnonzero(batch.attention_mask.reshape(-1) == 1)
    written = []
    for idx in layers:
        rec = {k: v.to(torch.float64).numpy() if v.is_floating_point() else v.numpy()
               for k, v in records[idx].items()}
        file = out_dir / f"routing_layer{idx}.csv"
        with open(file, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(ROUTING_COLUMNS)
            for row in real:
                tok = int(flat_ids[row])
                w.writerow([tok, int(bool(is_letter_mask(tok))),
                            " ".join(str(int(e)) for e in rec["experts"][row]),
                            _vec(rec["weights"][row]), _vec(rec["input"][row]), _vec(rec["output"][row])])
        written.append(file)
    return written


def read_routing_csv(path: str | PathLike) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "token_id": int(r["token_id"]),
                "is_letter_mask": r["is_letter_mask"] == "1",
                "experts": [int(x) for x in r["experts"].split()],
                "router_weights": np.array([float(x) for x in r["router_weights"].split()]),
                "input": np.array([float(x) for x in r["input"].split()]),
                "output": np.array([float(x) for x in r["output"].split()]),
            })
    return rows
