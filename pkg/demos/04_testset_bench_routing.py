# %% [markdown]
# Test sets, throughput and routing features
# ==========================================
# A test set replaces one word per sentence with its abbreviation.  No word
# may fill more than a fixed share of the records, which keeps the set from
# being dominated by a few frequent words.

# %%
import tempfile
from pathlib import Path

import torch

from abbrmlm.dataset import TestsetConfig, build_testset, stats
from abbrmlm.decode import DecodeOptions
from abbrmlm.errors import ShortfallError
from abbrmlm.evaluation import bench_qps, export_routing_stats, read_routing_csv
from abbrmlm.masking import MaskingConfig, build_batch
from abbrmlm.model import build_model, desk_config
from abbrmlm.pinyin import builtin_table
from abbrmlm.tokenizer import build_vocabulary
from abbrmlm.toy import ToyLanguage

torch.set_num_threads(1)
table = builtin_table()
corpus = ToyLanguage.default(table).corpus(1000, seed=4)
records = build_testset(corpus, table, TestsetConfig(300, max_word_share=0.02, seed=0))
print(stats(records).format_table())

# %% [markdown]
# Asking for more than the cap allows fails loudly rather than quietly
# returning a smaller set.

# %%
try:
    build_testset(corpus, table, TestsetConfig(900, max_word_share=0.004))
except ShortfallError as exc:
    print(exc)

# %% [markdown]
# Throughput: fully decoded queries per second, one client.  An untrained
# model decodes as fast as a trained one.

# %%
vocab = build_vocabulary(corpus)
model = build_model(desk_config(len(vocab)), seed=0).eval()
res = bench_qps(model, records, vocab, table, duration=3.0, options=DecodeOptions(beam_size=16))
print(f"QPS {res.qps:.1f}, {res.param_count:,} parameters, peak RSS {res.peak_rss_bytes / 2**20:.0f} MiB")

# %% [markdown]
# Routing export: one CSV per MoE layer with each token's experts, router
# weights and input/output features, ready for any dimensionality reduction.

# %%
batch = build_batch(corpus[:16], MaskingConfig(seed=0), table, vocab)
out = Path(tempfile.mkdtemp())
for path in export_routing_stats(model, batch, [1, 3], out):
    rows = read_routing_csv(path)
    masks = sum(r["is_letter_mask"] for r in rows)
    print(path.name, len(rows), "tokens,", masks, "letter masks, first row experts", rows[0]["experts"])
