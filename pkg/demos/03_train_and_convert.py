# %% [markdown]
# Train, convert, evaluate
# ========================
# A toy language keeps this to about a minute on one CPU core.  Its
# sentences come from a few templates whose slots are filled at random, so
# the context never says which word fills a slot: only the letters do.

# %%
import time

import torch

from abbrmlm.dataset import TestsetConfig, build_testset
from abbrmlm.decode import DecodeOptions, convert_text
from abbrmlm.evaluation import evaluate
from abbrmlm.masking import MaskingConfig
from abbrmlm.model import TrainConfig, build_model, desk_config, train
from abbrmlm.pinyin import builtin_table
from abbrmlm.tokenizer import build_vocabulary
from abbrmlm.toy import ToyLanguage

EPOCHS = 200
torch.set_num_threads(1)

table = builtin_table()
lang = ToyLanguage.default(table)
train_set = lang.corpus(300, seed=1)
held_out = lang.corpus(80, seed=2, exclude=train_set)
vocab = build_vocabulary(train_set + held_out)
print(train_set[0].to_line(), "|", train_set[1].to_line())

# %%
model = build_model(desk_config(len(vocab)), seed=0)
print(f"{model.num_parameters():,} parameters")
start = time.perf_counter()
result = train(model, train_set, table, vocab, TrainConfig(epochs=EPOCHS, lr=1e-3),
               on_epoch=lambda e: e.epoch % 50 == 0 and print(f"epoch {e.epoch:>3}  loss {e.mean_loss:.3f}"))
print(f"final loss {result.final_loss:.4f} after {time.perf_counter() - start:.0f}s")

# %% [markdown]
# Braces mark the abbreviation.  Candidates come back with scores
# normalised over the surviving beams.

# %%
for text in ["老师突然在{gy}讨论电脑", "妈妈也{xh}{yly}"]:
    ranked = convert_text(model, text, vocab, table, DecodeOptions(topk=3))
    for i, cands in enumerate(ranked.candidates):
        print(text, i, [(c.word, round(c.score, 3)) for c in cands])

# %% [markdown]
# Held-out sentences, one abbreviated word each.

# %%
records = build_testset(held_out, table, TestsetConfig(80, max_word_share=0.1, seed=0))
report = evaluate(model, records, vocab, table)
print(report.format_table())

# %% [markdown]
# The same budget with a plain [MASK] per character: the model learns the
# word length but not the letters, and ranks close to chance.

# %%
single = build_model(desk_config(len(vocab), mask_style="single"), seed=0)
train(single, train_set, table, vocab,
      TrainConfig(epochs=EPOCHS, lr=1e-3, masking=MaskingConfig(mask_style="single")))
print("multi-mask MRR@10 ", round(report.word["total"][10], 3))
print("single-mask MRR@10", round(evaluate(single, records, vocab, table).word["total"][10], 3))
