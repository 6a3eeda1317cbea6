"""Command-line entry point.

Settings come from three layers, later ones winning: built-in defaults, a
TOML file given with ``--config`` (or a shipped preset name), and flags.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .corpus import read_corpus
from .dataset import REFERENCE_LENGTH_WEIGHTS, TestsetConfig, build_testset, stats, write_review_file
from .decode import DecodeOptions, convert_text
from .errors import DataError, NumericError
from .evaluation import bench_qps, evaluate, export_routing_stats, read_testset, write_testset
from .masking import MaskingConfig, build_batch
from .model import TrainConfig, build_model, densify_to_moe, load_checkpoint, preset, save_checkpoint, train
from .pinyin import builtin_table, load_pinyin_table
from .tokenizer import Vocabulary, build_vocabulary

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("abbrmlm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {"preset": "desk"},
    "train": {
        "epochs": 32, "batch_size": 32, "lr": 1e-3, "warmup_epochs": 1.0,
        "weight_decay": 0.01, "clip_norm": 1.0, "max_len": 128,
        "mask_prob": 0.15, "poly_boost": 2.0, "mask_style": "letter", "seed": 0,
    },
    "paths": {"pinyin_table": None},
    "decode": {"beam_size": 16, "topk": 10, "hard_filter": False, "refine": False},
    "testset": {"size": 1000, "max_share": 0.004, "length_mix": "natural", "seed": 0},
    "bench": {"warmup": 3, "duration": 10.0, "concurrency": 1},
}

# flag dest -> (section, key)
OVERRIDES = {
    "seed": ("train", "seed"),
    "preset": ("model", "preset"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "warmup_epochs": ("train", "warmup_epochs"),
    "mask_style": ("train", "mask_style"),
    "mask_prob": ("train", "mask_prob"),
    "pinyin_table": ("paths", "pinyin_table"),
    "beam_size": ("decode", "beam_size"),
    "topk": ("decode", "topk"),
    "hard_filter": ("decode", "hard_filter"),
    "refine": ("decode", "refine"),
    "size": ("testset", "size"),
    "max_share": ("testset", "max_share"),
    "length_mix": ("testset", "length_mix"),
    "warmup": ("bench", "warmup"),
    "duration": ("bench", "duration"),
    "concurrency": ("bench", "concurrency"),
}


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("abbrmlm.data").iterdir() if p.name.endswith(".toml"))


def read_config_file(source: str) -> dict:
    """``source`` is a path to a TOML file or the name of a shipped preset."""
    path = Path(source)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    elif source in shipped_configs():
        text = resources.files("abbrmlm.data").joinpath(f"{source}.toml").read_text(encoding="utf-8")
    else:
        raise FileNotFoundError(f"config file not found: {source} (shipped presets: {', '.join(shipped_configs())})")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{source}: {exc}") from None
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ValueError(f"{source}: unknown config sections {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        for section, values in read_config_file(args.config).items():
            cfg[section].update(values)
    # --seed seeds everything that takes a seed.
    if getattr(args, "seed", None) is not None:
        cfg["testset"]["seed"] = args.seed
    for dest, (section, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def decode_options(cfg: dict) -> DecodeOptions:
    d = cfg["decode"]
    return DecodeOptions(beam_size=int(d["beam_size"]), topk=int(d["topk"]),
                         hard_filter=bool(d["hard_filter"]), refine=bool(d["refine"]))


def pinyin_table(cfg: dict):
    path = cfg["paths"].get("pinyin_table")
    return load_pinyin_table(path) if path else builtin_table()


def require(path: str | None, what: str) -> Path:
    if not path:
        raise ValueError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def load_model(path: str):
    model, config, meta = load_checkpoint(require(path, "model checkpoint"), return_metadata=True)
    if "vocab" not in meta:
        raise DataError(f"{path}: checkpoint has no vocabulary in its metadata")
    return model, Vocabulary(tuple(meta["vocab"]))


def emit(args, payload: Any, text: str) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, sort_keys=True))
    else:
        print(text)


def cmd_train(args, cfg) -> int:
    t = cfg["train"]
    masking = MaskingConfig(mask_prob=float(t["mask_prob"]), poly_boost=float(t["poly_boost"]),
                            seed=int(t["seed"]), mask_style=t["mask_style"])
    tc = TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), lr=float(t["lr"]),
                     warmup_epochs=float(t["warmup_epochs"]), weight_decay=float(t["weight_decay"]),
                     clip_norm=t["clip_norm"], max_len=int(t["max_len"]), seed=int(t["seed"]),
                     masking=masking)
    if args.dry_run:
        emit(args, cfg, json.dumps(cfg, indent=2, ensure_ascii=False))
        return EXIT_OK
    corpus = read_corpus(require(args.corpus, "corpus"))
    if not corpus:
        raise DataError(f"{args.corpus}: corpus is empty")
    table = pinyin_table(cfg)
    if args.init:
        model, vocab = load_model(args.init)
        target = preset(cfg["model"]["preset"], len(vocab), mask_style=t["mask_style"])
        new_layers = {i: v for i, v in target.moe_plan.items() if i not in model.config.moe_plan}
        if not model.config.moe_plan and new_layers:
            model = densify_to_moe(model, new_layers, seed=int(t["seed"]))
    else:
        vocab = build_vocabulary(corpus)
        model = build_model(preset(cfg["model"]["preset"], len(vocab), mask_style=t["mask_style"]),
                            seed=int(t["seed"]))

    def progress(entry):
        log.info("epoch %d  loss %.4f  lr %.2e", entry.epoch, entry.mean_loss, entry.lr)

    result = train(model, corpus, table, vocab, tc, on_epoch=progress)
    out = Path(args.out)
    save_checkpoint(result.model, out, {"vocab": list(vocab.id_to_token), "train": t})
    loss_log = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.csv")
    with open(loss_log, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "sum_loss", "n_masked", "lr"])
        for e in result.history:
            w.writerow([e.epoch, f"{e.mean_loss:.6f}", f"{e.sum_loss:.6f}", e.n_masked, f"{e.lr:.6g}"])
    emit(args, {"checkpoint": str(out), "loss_log": str(loss_log), "final_loss": result.final_loss,
                "parameters": result.model.num_parameters()},
         f"wrote {out} ({result.model.num_parameters():,} parameters), final loss {result.final_loss:.4f}")
    return EXIT_OK


def cmd_convert(args, cfg) -> int:
    model, vocab = load_model(args.model)
    ranked = convert_text(model, args.text, vocab, pinyin_table(cfg), decode_options(cfg))
    if args.json:
        payload = [{"span": list(span), "candidates": [{"word": c.word, "score": c.score} for c in cands]}
                   for span, cands in zip(ranked.spans, ranked.candidates)]
        print(json.dumps(payload, ensure_ascii=False))
        return EXIT_OK
    for i, cands in enumerate(ranked.candidates):
        if len(ranked) > 1:
            print(f"# span {i + 1}")
        for c in cands:
            print(f"{c.word}\t{c.score:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    model, vocab = load_model(args.model)
    records = read_testset(require(args.testset, "test set"))
    report = evaluate(model, records, vocab, pinyin_table(cfg), decode_options(cfg))
    for msg in report.rejected:
        log.warning(msg)
    if args.json:
        print(report.to_json())
    else:
        print(report.format_table())
    return EXIT_OK


def cmd_build_testset(args, cfg) -> int:
    ts = cfg["testset"]
    mix = ts["length_mix"]
    if mix not in ("natural", "reference"):
        raise ValueError(f"length_mix must be 'natural' or 'reference', got {mix!r}")
    config = TestsetConfig(int(ts["size"]), float(ts["max_share"]),
                           REFERENCE_LENGTH_WEIGHTS if mix == "reference" else None, int(ts["seed"]))
    corpus = read_corpus(require(args.corpus, "corpus"))
    records = build_testset(corpus, pinyin_table(cfg), config)
    write_testset(records, args.out)
    if args.review:
        write_review_file(records, args.review)
    s = stats(records)
    emit(args, s.to_dict(), f"wrote {len(records)} records to {args.out}\n{s.format_table()}")
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    model, vocab = load_model(args.model)
    records = read_testset(require(args.testset, "test set"))
    b = cfg["bench"]
    res = bench_qps(model, records, vocab, pinyin_table(cfg), warmup=int(b["warmup"]),
                    duration=float(b["duration"]), options=decode_options(cfg),
                    concurrency=int(b["concurrency"]))
    emit(args, res.to_dict(),
         f"QPS {res.qps:.2f} ({res.queries} queries in {res.seconds:.1f}s, concurrency {res.concurrency})\n"
         f"parameters {res.param_count:,} ({res.param_bytes / 2**20:.1f} MiB), "
         f"peak RSS {res.peak_rss_bytes / 2**20:.1f} MiB")
    return EXIT_OK


def cmd_export_routing(args, cfg) -> int:
    model, vocab = load_model(args.model)
    layers = args.layers if args.layers else sorted(model.moe_layers())
    if not layers:
        raise ValueError("model has no MoE layers")
    corpus = read_corpus(require(args.corpus, "corpus"))
    rng = np.random.default_rng(cfg["train"]["seed"])
    n = min(args.sentences, len(corpus))
    sample = [corpus[int(i)] for i in sorted(rng.choice(len(corpus), n, replace=False))]
    masking = MaskingConfig(mask_prob=float(cfg["train"]["mask_prob"]), seed=int(cfg["train"]["seed"]),
                            mask_style=model.config.mask_style)
    batch = build_batch(sample, masking, pinyin_table(cfg), vocab, max_len=model.config.max_position)
    files = export_routing_stats(model, batch, layers, args.out)
    emit(args, [str(f) for f in files], "\n".join(f"wrote {f}" for f in files))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file or shipped preset name "
                        f"({', '.join(shipped_configs())})")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--pinyin-table", dest="pinyin_table", help="TSV reading table (default: built in)")
    common.add_argument("-v", "--verbose", action="store_true")

    decode = argparse.ArgumentParser(add_help=False)
    decode.add_argument("--beam-size", dest="beam_size", type=int)
    decode.add_argument("--topk", type=int)
    decode.add_argument("--hard-filter", dest="hard_filter", action="store_true", default=None,
                        help="only consider characters whose initial matches the letter")
    decode.add_argument("--refine", action="store_true", default=None,
                        help="re-score each position given the characters chosen before it")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", required=True, help="checkpoint path")

    p = argparse.ArgumentParser(prog="abbrmlm", description="Pinyin abbreviation to character conversion.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a segmented corpus")
    t.add_argument("--corpus")
    t.add_argument("--out", default="model.ckpt")
    t.add_argument("--loss-log", dest="loss_log", help="loss CSV (default: <out>.loss.csv)")
    t.add_argument("--init", help="start from this checkpoint; a dense one is converted to MoE")
    t.add_argument("--preset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup-epochs", dest="warmup_epochs", type=float)
    t.add_argument("--mask-prob", dest="mask_prob", type=float)
    t.add_argument("--mask-style", dest="mask_style", choices=("letter", "single"))
    t.add_argument("--dry-run", dest="dry_run", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("convert", parents=[common, decode, model], help="convert text with {letters} spans")
    c.add_argument("text", help='e.g. "所以我{fq}了音乐"')
    c.set_defaults(func=cmd_convert)

    e = sub.add_parser("eval", parents=[common, decode, model], help="MRR report over a test set")
    e.add_argument("--testset", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("build-testset", parents=[common], help="sample a test set from a corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--size", type=int)
    b.add_argument("--max-share", dest="max_share", type=float)
    b.add_argument("--length-mix", dest="length_mix", choices=("natural", "reference"))
    b.add_argument("--review", help="also write a TSV for manual review")
    b.set_defaults(func=cmd_build_testset)

    q = sub.add_parser("bench", parents=[common, decode, model], help="measure decoding throughput")
    q.add_argument("--testset", required=True)
    q.add_argument("--duration", type=float)
    q.add_argument("--warmup", type=int)
    q.add_argument("--concurrency", type=int)
    q.set_defaults(func=cmd_bench)

    r = sub.add_parser("export-routing", parents=[common, model], help="dump MoE routing features as CSV")
    r.add_argument("--corpus", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--layers", type=int, nargs="+")
    r.add_argument("--sentences", type=int, default=64)
    r.set_defaults(func=cmd_export_routing)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args, resolve_config(args))
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
