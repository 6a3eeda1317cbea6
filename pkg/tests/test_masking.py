import numpy as np
import pytest

from abbrmlm.corpus import SegmentedSentence
from abbrmlm.masking import (
    IGNORE_INDEX,
    MaskingConfig,
    apply_multi_mask,
    build_batch,
    draw_order,
    mask_rate,
    select_words,
    selection_weights,
)
from abbrmlm.pinyin import initial_of
from abbrmlm.tokenizer import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    build_vocabulary,
    encode,
    is_letter_mask,
    letter_mask_id,
)

TABLE2 = SegmentedSentence(("即使", "一无是处", "的", "人", "也", "可以", "谈", "梦想", "吗"))


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary([TABLE2, SegmentedSentence(("我们", "喜欢", "音乐", "，", "A4"))])


def test_config_validation():
    with pytest.raises(ValueError):
        MaskingConfig(mask_prob=1.5)
    with pytest.raises(ValueError):
        MaskingConfig(poly_boost=0.5)
    with pytest.raises(ValueError):
        MaskingConfig(mask_style="random")


def test_zero_prob_selects_nothing(table, rng):
    cfg = MaskingConfig(mask_prob=0.0)
    assert all(select_words(TABLE2, cfg, rng, table) == set() for _ in range(50))


def test_full_prob_selects_all(table, rng):
    cfg = MaskingConfig(mask_prob=1.0)
    assert select_words(TABLE2, cfg, rng, table) == set(range(len(TABLE2.words)))


def test_unreadable_words_never_selected(table, rng):
    s = SegmentedSentence(("我们", "，", "A4", "音乐"))
    cfg = MaskingConfig(mask_prob=1.0)
    for _ in range(20):
        assert select_words(s, cfg, rng, table) == {0, 3}


def test_weights():
    from abbrmlm.pinyin import builtin_table
    s = SegmentedSentence(("病", "梦想", "A"))
    w = selection_weights(s, MaskingConfig(poly_boost=2.0), builtin_table())
    assert w.tolist() == [1.0, 4.0, 0.0]


def test_first_draw_frequency(rng):
    # One 1-char word (weight 1) and one 2-char word (weight 2 * boost 2 = 4):
    # the 2-char word comes first with probability 4 / (1 + 4).
    weights = np.array([1.0, 4.0])
    expected = weights[1] / weights.sum()
    trials = 100_000
    first = sum(draw_order(weights, rng)[0] == 1 for _ in range(trials))
    assert abs(first / trials - expected) < 0.02


def test_draw_order_matches_enumeration(rng):
    # Probability of each full ordering, by the sequential-draw definition.
    w = np.array([1.0, 2.0, 3.0])
    import itertools
    exact = {}
    for perm in itertools.permutations(range(3)):
        p, left = 1.0, w.sum()
        for i in perm:
            p *= w[i] / left
            left -= w[i]
        exact[perm] = p
    n = 60_000
    counts = {}
    for _ in range(n):
        k = tuple(draw_order(w, rng).tolist())
        counts[k] = counts.get(k, 0) + 1
    for perm, p in exact.items():
        assert abs(counts.get(perm, 0) / n - p) < 0.01


def test_multi_mask_examples(table, vocab):
    m = apply_multi_mask(TABLE2, {1, 7}, table, vocab)
    letters = [letter_mask_id(vocab, c) for c in "ywsc"]
    assert m.ids[2:6].tolist() == letters
    assert m.ids[12:14].tolist() == [letter_mask_id(vocab, "m"), letter_mask_id(vocab, "x")]
    assert m.letters[2:6] == list("ywsc")
    ids = encode(vocab, TABLE2.text)
    assert m.targets[2:6].tolist() == ids[2:6].tolist()
    untouched = [i for i in range(len(ids)) if not (2 <= i < 6 or 12 <= i < 14)]
    assert (m.ids[untouched] == ids[untouched]).all()
    assert (m.targets[untouched] == IGNORE_INDEX).all()


def test_empty_selection_is_identity(table, vocab):
    m = apply_multi_mask(TABLE2, set(), table, vocab)
    assert m.ids.tolist() == encode(vocab, TABLE2.text).tolist()
    assert (m.targets == IGNORE_INDEX).all()


def test_single_mask_style(table, vocab):
    m = apply_multi_mask(TABLE2, {7}, table, vocab, mask_style="single")
    assert m.ids[12:14].tolist() == [MASK_ID, MASK_ID]
    assert m.letters[12:14] == ["m", "x"]


def test_batch_without_masks(table, vocab):
    b = build_batch([TABLE2], MaskingConfig(mask_prob=0.0), table, vocab)
    assert (b.target_ids == IGNORE_INDEX).all()
    assert b.input_ids[0, 0] == CLS_ID and b.input_ids[0, -1] == SEP_ID


def test_padding_alignment(table, vocab):
    short = SegmentedSentence(("我们", "喜欢"))
    b = build_batch([TABLE2, short], MaskingConfig(seed=3), table, vocab)
    assert b.shape == (2, len(TABLE2) + 2)
    pad = b.input_ids == PAD_ID
    assert ((b.attention_mask == 0) == pad).all()
    assert b.input_ids[1, len(short) + 1] == SEP_ID
    assert pad[1, len(short) + 2:].all()


def test_fixed_seed_is_byte_identical(table, vocab, toy_sentences, toy_vocab):
    cfg = MaskingConfig(seed=9)
    a = build_batch(toy_sentences, cfg, table, toy_vocab)
    b = build_batch(toy_sentences, cfg, table, toy_vocab)
    for field in ("input_ids", "target_ids", "letter_labels", "attention_mask"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


def test_truncation_at_word_boundary(table, vocab):
    b = build_batch([TABLE2], MaskingConfig(mask_prob=1.0), table, vocab, max_len=7)
    # 即使 (2) fits, 一无是处 (4) would need 6 > 5 characters.
    assert b.sentences[0].words == ("即使",)
    assert b.shape == (1, 4)


def test_empty_batch_rejected(table, vocab):
    with pytest.raises(ValueError):
        build_batch([], MaskingConfig(), table, vocab)


def check_invariants(batch, table, vocab):
    """Letter consistency, no leakage, and whole-word coverage for a batch."""
    masked = batch.target_ids != IGNORE_INDEX
    for r, c in zip(*np.nonzero(masked)):
        gold = vocab.id_to_token[batch.target_ids[r, c]]
        assert is_letter_mask(batch.input_ids[r, c])
        assert batch.input_ids[r, c] != batch.target_ids[r, c]
        assert batch.letter_labels[r, c] == initial_of(table, gold)
        assert batch.input_ids[r, c] == letter_mask_id(vocab, initial_of(table, gold))
    for r, s in enumerate(batch.sentences):
        for start, w in zip(s.word_offsets(), s.words):
            span = masked[r, 1 + start:1 + start + len(w)]
            assert span.all() or not span.any()
    assert (batch.letter_labels[~masked] == "").all()


def test_invariants_on_toy_batches(table, toy_sentences, toy_vocab):
    cfg = MaskingConfig(mask_prob=0.3, seed=5)
    batch = build_batch(toy_sentences, cfg, table, toy_vocab)
    assert batch.num_masked > 0
    check_invariants(batch, table, toy_vocab)


def test_letter_index_sets_partition_masks(table, toy_sentences, toy_vocab):
    batch = build_batch(toy_sentences, MaskingConfig(seed=2), table, toy_vocab)
    sets = batch.letter_index_sets()
    assert sum(len(v) for v in sets.values()) == batch.num_masked


def test_rate_close_to_target(table, lang):
    sents = lang.corpus(2000, seed=4, unique=False)
    vocab = build_vocabulary(sents)
    batch = build_batch(sents, MaskingConfig(mask_prob=0.15, seed=8), table, vocab)
    assert abs(mask_rate(batch) - 0.15) < 0.02
