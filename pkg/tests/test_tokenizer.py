import pytest
from hypothesis import given, settings, strategies as st

from coarsetune.tokenizer import (CONT, N_SPECIAL, SPECIAL_TOKENS, UNK_ID, VocabError, Vocabulary,
                                  basic_split, build_vocab, decode, encode, encode_words, wordpiece)


def _vocab(*pieces):
    return Vocabulary(list(SPECIAL_TOKENS) + list(pieces))


def test_specials_fixed_order():
    v = build_vocab(["hello world", "hello there"], 40)
    assert tuple(v.tokens[:N_SPECIAL]) == ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[Q]", "[D]")


def test_merge_trace():
    # (a,##a) occurs 5 times and (a,##b) never, so "aa" comes first; then (aa,##a)
    # twice against (aa,##b) once gives "aaa".  Base characters are sorted.
    v = build_vocab(["aaa aaa aab"], N_SPECIAL + 3 + 2, min_freq=1)
    assert v.tokens[N_SPECIAL:] == ["##a", "##b", "a", "aa", "aaa"]


def test_min_freq_blocks_merges():
    v = build_vocab(["abc def"], 100, min_freq=5)
    assert all(len(t.replace(CONT, "")) == 1 for t in v.tokens[N_SPECIAL:])


def test_target_size_too_small():
    with pytest.raises(VocabError):
        build_vocab(["abcdef"], N_SPECIAL + 2)


def test_empty_corpus():
    with pytest.raises(VocabError):
        build_vocab([""], 50)


def test_bad_vocab_files():
    with pytest.raises(VocabError):
        Vocabulary(["a", "b"])
    with pytest.raises(VocabError):
        _vocab("x", "x")
    with pytest.raises(VocabError):
        _vocab("has space")


def test_encode_empty():
    assert encode("", _vocab("a")) == []


def test_unaffable():
    v = _vocab("un", "##aff", "##able", "##a")
    ids = encode("unaffable", v)
    assert [v.tokens[i] for i in ids] == ["un", "##aff", "##able"]
    assert decode(ids, v) == "unaffable"


def test_unknown_word():
    v = _vocab("a", "##b")
    assert encode("xyz ab", v) == [UNK_ID, v.id_of("a"), v.id_of("##b")]


def test_raw_specials_not_emitted():
    v = _vocab("q", "##]", "[", "]", "m", "##a", "##s", "##k")
    ids = encode("[MASK] [Q]", v)
    assert all(i >= N_SPECIAL or i == UNK_ID for i in ids)


def test_decode_mask_literal():
    v = _vocab("a")
    assert decode([4], v) == "[MASK]"
    with pytest.raises(IndexError):
        decode([99], v)


def test_punctuation_split():
    assert basic_split("Hello, World!") == ["hello", ",", "world", "!"]


def test_encode_words_grouping():
    v = _vocab("ab", "##c", "d")
    assert encode_words("abc d", v) == [[v.id_of("ab"), v.id_of("##c")], [v.id_of("d")]]


def test_vocab_round_trip(tmp_path):
    v = build_vocab(["the quick brown fox", "the lazy dog"], 45)
    path = tmp_path / "vocab.txt"
    v.save(path)
    assert Vocabulary.load(path) == v


CORPUS = ["the quick brown fox jumps over the lazy dog", "a quick movement of the enemy",
          "jumps and jumping and jumped", "brownish foxes over lazy dogs"]
VOCAB = build_vocab(CORPUS, 80, min_freq=1)
words = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(words)
def test_first_piece_is_longest_prefix(w):
    ids = wordpiece(w, VOCAB)
    if ids == [UNK_ID]:
        return
    first = VOCAB.tokens[ids[0]]
    longest = max(n for n in range(1, len(w) + 1) if w[:n] in VOCAB)
    assert len(first) == longest


@settings(max_examples=200, deadline=None)
@given(st.lists(words, min_size=1, max_size=6))
def test_continuation_never_word_initial(ws):
    for pieces in encode_words(" ".join(ws), VOCAB):
        assert not VOCAB.tokens[pieces[0]].startswith(CONT)
        assert all(VOCAB.tokens[p].startswith(CONT) for p in pieces[1:])


@settings(max_examples=200, deadline=None)
@given(st.lists(words, min_size=1, max_size=6))
def test_in_vocab_round_trip(ws):
    text = " ".join(ws)
    ids = encode(text, VOCAB)
    assert encode(text, VOCAB) == ids
    if UNK_ID not in ids:
        assert decode(ids, VOCAB) == text
