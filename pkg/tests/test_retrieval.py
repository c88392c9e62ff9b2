import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coarsetune.data import DocStore
from coarsetune.retrieval import (IndexFormatError, InvertedIndex, bm25_score, build_index, score_all,
                                  search)
from coarsetune.tokenizer import basic_split

from helpers import bf_bm25

WORDS = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"]


def _random_store(rng, n=50):
    docs = []
    for i in range(n):
        k = int(rng.integers(1, 25))
        docs.append((f"doc{i:02d}", " ".join(rng.choice(WORDS, size=k))))
    return DocStore(docs)


def test_two_doc_counts():
    idx = build_index(DocStore([("d1", "a b"), ("d2", "b c")]))
    assert (idx.df("a"), idx.df("b"), idx.df("c")) == (1, 2, 1)
    assert idx.avglen == 2.0


def test_hand_score():
    idx = build_index(DocStore([("d1", "a b"), ("d2", "b c")]))
    # N=2, df(a)=1, tf=1, len=avglen -> idf=ln 2, tf part = 2.2/2.2 = 1
    assert abs(bm25_score(["a"], "d1", idx) - math.log(2)) < 1e-9
    assert abs(bm25_score(["a"], "d1", idx) - 0.6931) < 1e-4
    assert bm25_score(["zzz"], "d1", idx) == 0.0
    with pytest.raises(KeyError):
        bm25_score(["a"], "nope", idx)


def test_search_matches_brute_force():
    rng = np.random.default_rng(0)
    store = _random_store(rng)
    idx = build_index(store)
    terms = {d: basic_split(t) for d, t in store.items()}
    for _ in range(30):
        q = list(rng.choice(WORDS, size=int(rng.integers(1, 4))))
        oracle = bf_bm25(q, terms)
        expect = sorted(((d, s) for d, s in oracle.items() if s > 0), key=lambda x: (-x[1], x[0]))
        got = search(" ".join(q), idx, k=50)
        assert [d for d, _ in got] == [d for d, _ in expect]
        for (_, a), (_, b) in zip(got, expect):
            assert abs(a - b) < 1e-9
        for d in store.ids:
            assert abs(bm25_score(q, d, idx) - oracle[d]) < 1e-9


def test_search_tie_break_and_k():
    idx = build_index(DocStore([("b", "x y"), ("a", "x y"), ("c", "z")]))
    assert [d for d, _ in search("x", idx, k=5)] == ["a", "b"]
    with pytest.raises(ValueError):
        search("x", idx, k=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30), st.integers(1, 30))
def test_search_prefix_property(seed, k1, k2):
    rng = np.random.default_rng(seed)
    idx = build_index(_random_store(rng, 30))
    q = " ".join(rng.choice(WORDS, size=3))
    lo, hi = sorted((k1, k2))
    assert search(q, idx, lo) == search(q, idx, hi)[:lo]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_scores_finite_non_negative(seed):
    rng = np.random.default_rng(seed)
    idx = build_index(_random_store(rng, 20))
    s = score_all(list(rng.choice(WORDS, size=4)), idx)
    assert np.isfinite(s).all() and (s >= 0).all()


def test_unrelated_doc_keeps_tf_component():
    base = [("d1", "alpha beta alpha"), ("d2", "beta gamma")]
    idx1 = build_index(DocStore(base))
    idx2 = build_index(DocStore(base + [("d3", "omega omega omega")]))
    k1, b = 1.2, 0.75

    def tf_part(idx, term, doc):
        tf = idx.tf(term, doc)
        dl = idx.doc_len[idx.docnum[doc]]
        return tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / idx.avglen))

    # the new document is longer than average, so avglen grows and the tf part cannot fall
    assert tf_part(idx2, "alpha", "d1") >= tf_part(idx1, "alpha", "d1")
    assert idx2.tf("alpha", "d1") == idx1.tf("alpha", "d1")


def test_index_round_trip(tmp_path):
    idx = build_index(_random_store(np.random.default_rng(1)))
    idx.save(tmp_path / "i.idx")
    back = InvertedIndex.load(tmp_path / "i.idx")
    assert back == idx and back.avglen == idx.avglen
    back.save(tmp_path / "j.idx")
    assert (tmp_path / "i.idx").read_bytes() == (tmp_path / "j.idx").read_bytes()


def test_index_bad_file(tmp_path):
    p = tmp_path / "x.idx"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(IndexFormatError):
        InvertedIndex.load(p)
    with pytest.raises(IndexFormatError):
        build_index(DocStore())
