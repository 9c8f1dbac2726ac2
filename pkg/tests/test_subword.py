import collections

import pytest
from hypothesis import given, settings, strategies as st

from ctrlfl.errors import InputError
from ctrlfl.subword import (
    BOS_ID, DESK_MERGES, END, EOS_ID, FULL_SCALE_MERGES, PAD_ID, SPECIALS, UNK_ID,
    BpeVocab, decode, encode, tokens, train_bpe,
)

CORPUS = ["the cat sat on the mat", "a cat and a hat", "that hat is the best hat"]


def brute_force_pair_counts(corpus):
    # independent recount: every word as chars with the end marker on the last one
    counts = collections.Counter()
    for line in corpus:
        for w in line.split():
            syms = list(w[:-1]) + [w[-1] + END]
            for a, b in zip(syms, syms[1:]):
                counts[(a, b)] += 1
    return counts


def test_first_merge_is_most_frequent_pair():
    counts = brute_force_pair_counts(["aaab aab"])
    assert counts[("a", "a")] == 3
    assert max(counts.values()) == 3
    vocab = train_bpe(["aaab aab"], 1)
    assert vocab.merges == [("a", "a")]


def test_encode_with_one_merge():
    vocab = train_bpe(["aaab aab"], 1)
    assert tokens("aaab", vocab) == ["aa", "a", "b"]


def test_zero_merges_is_character_level():
    vocab = train_bpe(CORPUS, 0)
    assert vocab.merges == []
    body = vocab.id_to_token[len(SPECIALS):]
    assert all(len(t.replace(END, "")) == 1 for t in body)
    chars = {c for line in CORPUS for c in line.replace(" ", "")}
    assert {t.replace(END, "") for t in body} == chars
    assert len(body) == 2 * len(chars)


def test_specials_at_fixed_ids_and_dense():
    vocab = train_bpe(CORPUS, 20)
    assert vocab.id_to_token[:4] == list(SPECIALS)
    assert (PAD_ID, BOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)
    assert sorted(vocab.token_to_id.values()) == list(range(len(vocab)))


def test_vocab_size_bound():
    chars = {c for line in CORPUS for c in line.replace(" ", "")}
    for k in (0, 5, 20):
        vocab = train_bpe(CORPUS, k)
        assert len(vocab.merges) <= k
        # each character appears with and without the end marker
        assert len(SPECIALS) + 2 * len(chars) <= len(vocab) <= len(SPECIALS) + 2 * len(chars) + k


def test_empty_input():
    vocab = train_bpe(CORPUS, 10)
    assert encode("", vocab) == []
    assert encode("", vocab, frame=True) == [BOS_ID, EOS_ID]


def test_errors():
    with pytest.raises(InputError):
        train_bpe([], 10)
    with pytest.raises(InputError):
        train_bpe(["   "], 10)
    with pytest.raises(InputError):
        train_bpe(CORPUS, -1)


def test_unknown_chars_map_to_unk():
    vocab = train_bpe(CORPUS, 10)
    assert UNK_ID in encode("zzq", vocab)


def test_decode_drops_specials_and_rejects_bad_ids():
    vocab = train_bpe(CORPUS, 10)
    ids = encode("the cat", vocab)
    assert decode([BOS_ID, *ids, PAD_ID, EOS_ID, PAD_ID], vocab) == "the cat"
    with pytest.raises(IndexError):
        decode([len(vocab)], vocab)
    with pytest.raises(IndexError):
        decode([-1], vocab)


def test_mixed_specials_round_trip():
    vocab = train_bpe(CORPUS, 15)
    ids = [BOS_ID] + encode("the hat", vocab) + [PAD_ID] + encode("a mat", vocab) + [EOS_ID]
    assert decode(ids, vocab) == "the hat a mat"
    assert encode(decode(ids, vocab), vocab, frame=True) == [i for i in ids if i != PAD_ID]


def test_determinism():
    a, b = train_bpe(CORPUS, 25), train_bpe(list(CORPUS), 25)
    assert a.merges == b.merges and a.id_to_token == b.id_to_token


def test_file_round_trip_byte_identical(tmp_path):
    vocab = train_bpe(CORPUS, 25)
    p1, p2 = tmp_path / "v1.txt", tmp_path / "v2.txt"
    vocab.save(p1)
    loaded = BpeVocab.load(p1)
    loaded.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.merges == vocab.merges and loaded.token_to_id == vocab.token_to_id
    assert encode("the best cat", loaded) == encode("the best cat", vocab)


def test_bad_vocab_file():
    with pytest.raises(InputError):
        BpeVocab.loads("not a vocab\n")


def test_merge_presets():
    assert FULL_SCALE_MERGES == 30000 and DESK_MERGES == 200
    # full-scale preset only needs to survive a config round trip
    from ctrlfl.cli import Config
    cfg = Config(num_merges=FULL_SCALE_MERGES)
    assert Config.from_dict(cfg.to_dict()).num_merges == 30000


TRAIN_CHARS = "".join(sorted({c for line in CORPUS for c in line if c != " "}))
words = st.text(alphabet=TRAIN_CHARS, min_size=1, max_size=6)
sentences = st.lists(words, min_size=0, max_size=6).map(" ".join)


@settings(max_examples=80, deadline=None)
@given(sentences)
def test_round_trip_on_training_alphabet(s):
    vocab = train_bpe(CORPUS, 30)
    assert decode(encode(s, vocab), vocab) == s


@settings(max_examples=40, deadline=None)
@given(st.lists(words, min_size=1, max_size=5).map(" ".join))
def test_ids_round_trip(s):
    vocab = train_bpe(CORPUS, 30)
    ids = encode(s, vocab)
    assert encode(decode(ids, vocab), vocab) == ids


@settings(max_examples=40, deadline=None)
@given(sentences)
def test_monotone_compression(s):
    lengths = [len(encode(s, train_bpe(CORPUS, k))) for k in (0, 3, 10, 30, 60)]
    assert all(a >= b for a, b in zip(lengths, lengths[1:]))
