# %% [markdown]
# Letter masks
# ============
# A pinyin abbreviation keeps only the first letter of each syllable:
# 梦想 (meng xiang) becomes "mx".  The model sees one mask token per letter,
# so the letter survives into the input while the character is hidden.

# %%
import numpy as np

from abbrmlm.corpus import SegmentedSentence
from abbrmlm.masking import MaskingConfig, apply_multi_mask, build_batch
from abbrmlm.pinyin import abbreviation_of, builtin_table, full_pinyin_of
from abbrmlm.tokenizer import build_vocabulary, decode

table = builtin_table()
print(len(table), "characters in the built-in table")
for word in ["梦想", "一无是处", "媒体", "模特"]:
    print(word, full_pinyin_of(table, word), abbreviation_of(table, word))

# %% [markdown]
# Masking one sentence by hand: words 1 and 7 are hidden.

# %%
s = SegmentedSentence(("即使", "一无是处", "的", "人", "也", "可以", "谈", "梦想", "吗"))
vocab = build_vocabulary([s])
m = apply_multi_mask(s, {1, 7}, table, vocab)
print(decode(vocab, m.ids))
print("targets at", np.flatnonzero(m.targets >= 0))

# %% [markdown]
# Random whole-word masking picks about 15% of the characters, preferring
# longer words (each multi-character word gets weight length x boost).

# %%
batch = build_batch([s] * 8, MaskingConfig(mask_prob=0.15, seed=0), table, vocab)
for row in batch.input_ids:
    print(decode(vocab, row[1:len(s) + 1]))
