import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microbert.tokenizer import (
    SPECIAL_TOKENS,
    UNK_ID,
    Vocabulary,
    choose_vocab_size,
    decode_word,
    encode,
    normalize,
    train_wordpiece,
)


def test_normalize_examples():
    out = normalize("Café")
    assert out == "café"
    assert len(out) == 5
    assert normalize("ABC") == "abc"


@given(st.text(max_size=30))
@settings(max_examples=1000, deadline=None)
def test_normalize_idempotent(text):
    once = normalize(text)
    assert normalize(once) == once


@pytest.mark.parametrize("count,size", [(0, 8000), (200_000, 14000), (5_000_000, 14000), (100_000, 11000)])
def test_choose_vocab_size(count, size):
    assert choose_vocab_size(count) == size


@given(st.integers(0, 400_000), st.integers(0, 400_000))
def test_choose_vocab_size_monotone(a, b):
    lo, hi = sorted((a, b))
    assert 8000 <= choose_vocab_size(lo) <= choose_vocab_size(hi) <= 14000


def test_train_toy_merge():
    vocab = train_wordpiece(["ab"] * 100, 10)
    assert "a" in vocab and "##b" in vocab and "ab" in vocab
    assert len(vocab) == 10
    assert vocab.pieces[:5] == SPECIAL_TOKENS


def test_train_degenerate_budget_returns_alphabet():
    vocab = train_wordpiece(["abc", "cab"] * 5, 3)
    assert set("abc") <= set(vocab.pieces)
    assert len(vocab) == 5 + 6


def test_train_rejects_empty_corpus():
    with pytest.raises(ValueError):
        train_wordpiece([], 100)


def test_train_is_deterministic(toy_corpus):
    words = [w for s in toy_corpus.train_sentences() for w in s]
    assert train_wordpiece(words, 300, seed=3).pieces == train_wordpiece(words, 300, seed=3).pieces


def test_greedy_longest_match():
    vocab = Vocabulary(list(SPECIAL_TOKENS) + ["u", "un", "##happi", "##h", "##ness", "##n"])
    sent = encode(["unhappiness"], vocab)
    assert [vocab.piece_of(i) for i in sent.ids] == ["[CLS]", "un", "##happi", "##ness", "[SEP]"]
    assert sent.spans.tolist() == [[1, 4]]


def test_unknown_word_is_single_unk():
    vocab = Vocabulary(list(SPECIAL_TOKENS) + ["a", "##a"])
    sent = encode(["a", "zzz", "aa"], vocab)
    assert sent.ids[sent.spans[1, 0]:sent.spans[1, 1]].tolist() == [UNK_ID]
    assert (sent.spans[:, 1] - sent.spans[:, 0]).tolist() == [1, 1, 2]


def test_vocabulary_file_round_trip(tmp_path, toy_vocab):
    path = tmp_path / "vocab.txt"
    toy_vocab.save(path)
    assert Vocabulary.load(path) == toy_vocab
    assert path.read_text(encoding="utf-8").splitlines()[:5] == list(SPECIAL_TOKENS)


@given(st.lists(st.text(alphabet="abcdeéñ", min_size=1, max_size=12), min_size=1, max_size=8))
@settings(max_examples=200, deadline=None)
def test_round_trip_and_partition(words):
    vocab = _ALPHA_VOCAB
    sent = encode(words, vocab)
    widths = sent.spans[:, 1] - sent.spans[:, 0]
    assert np.all(widths >= 1)
    assert widths.sum() == sent.n_pieces == len(sent.ids) - 2
    assert np.all(sent.spans[1:, 0] == sent.spans[:-1, 1])
    for i, w in enumerate(sent.normalized):
        assert decode_word(vocab, sent.pieces_of(i)) == w


_ALPHA_VOCAB = train_wordpiece(
    ["abc", "bead", "café", "niño", "dead", "cab", "abe", "a", "b", "c", "d", "e", "́", "̃", "n", "i", "o", "f"] * 3,
    80,
)
