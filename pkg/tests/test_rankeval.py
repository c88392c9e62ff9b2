import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coarsetune import tokenizer as tok
from coarsetune.data import DocStore, InstanceBuilder, Qrels
from coarsetune.model import Encoder, preset
from coarsetune.rankeval import (MetricsReport, RankedRun, RunError, average_precision, evaluate,
                                 ndcg_at, per_query_metrics, reciprocal_rank, report_table, rerank)

from helpers import bf_average_precision, bf_ndcg, bf_reciprocal_rank


def _random_case(rng):
    qrels, scored = Qrels(), {}
    for q in range(int(rng.integers(1, 11))):
        qid = f"q{q}"
        n = int(rng.integers(1, 21))
        docs = [f"d{i}" for i in range(n)]
        for d in docs:
            if rng.random() < 0.6:
                qrels.add(qid, d, int(rng.integers(0, 3)))
        # some judged relevant docs are never retrieved
        if rng.random() < 0.3:
            qrels.add(qid, "unretrieved", 1)
        scored[qid] = [(d, float(rng.integers(0, 5))) for d in docs]
    return RankedRun.from_scores(scored), qrels


def test_hand_cases():
    ranked = ["a", "x", "b", "y", "z"]
    assert average_precision(ranked, {"a", "b"}) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert round(average_precision(ranked, {"a", "b"}), 4) == 0.8333
    expect = (1 + 1 / math.log2(4)) / (1 + 1 / math.log2(3))
    assert ndcg_at(ranked, {"a": 1, "b": 1}, 5) == pytest.approx(expect, abs=1e-12)
    assert abs(expect - 0.9197) < 1e-4
    assert reciprocal_rank(["x", "a"], {"a"}) == 0.5


def test_perfect_ranking():
    ranked = ["a", "b", "c"]
    assert reciprocal_rank(ranked, {"a", "b"}) == 1.0
    assert average_precision(ranked, {"a", "b"}) == 1.0
    assert ndcg_at(ranked, {"a": 1, "b": 1}, 5) == 1.0


def test_brute_force_equivalence():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        run, qrels = _random_case(rng)
        values, excluded = per_query_metrics(run, qrels)
        for qid in run.qids():
            rel = qrels.relevant(qid)
            if not rel:
                assert qid in excluded
                continue
            ranking = run.docids(qid)
            gains = {d: g for d, g in qrels.judgments(qid).items() if g > 0}
            assert abs(values["MRR"][qid] - bf_reciprocal_rank(ranking, rel)) <= 1e-9
            assert abs(values["MAP"][qid] - bf_average_precision(ranking, rel)) <= 1e-9
            for k in (5, 15, 30):
                assert abs(values[f"nDCG@{k}"][qid] - bf_ndcg(ranking, gains, k)) <= 1e-9


def test_graded_mode_uses_original_grades():
    qrels = Qrels()
    qrels.add("q", "a", 1)
    qrels.add("q", "b", 2)
    run = RankedRun.from_scores({"q": [("a", 2.0), ("b", 1.0)]})
    binary, _ = per_query_metrics(run, qrels)
    graded, _ = per_query_metrics(run, qrels, graded=True)
    assert binary["nDCG@5"]["q"] == 1.0 and graded["nDCG@5"]["q"] < 1.0


rankings = st.permutations([f"d{i}" for i in range(12)])
relsets = st.sets(st.sampled_from([f"d{i}" for i in range(12)]), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(rankings, relsets)
def test_ndcg_monotone_in_k(ranking, rel):
    # nDCG itself can drop while k < |rel| (the ideal grows faster), e.g. one of two
    # relevant docs at rank 1 gives nDCG@1 = 1 > nDCG@2.  DCG is monotone for every k,
    # and nDCG is monotone once the ideal ranking is exhausted.
    gains = {d: 1 for d in rel}

    def idcg(k):
        return sum(1 / math.log2(i + 1) for i in range(1, min(k, len(rel)) + 1))

    dcg = [ndcg_at(ranking, gains, k) * idcg(k) for k in range(1, 14)]
    assert all(a <= b + 1e-12 for a, b in zip(dcg, dcg[1:]))
    tail = [ndcg_at(ranking, gains, k) for k in range(len(rel), 14)]
    assert all(a <= b + 1e-12 for a, b in zip(tail, tail[1:]))


@settings(max_examples=200, deadline=None)
@given(rankings, relsets, st.integers(1, 11))
def test_promoting_relevant_never_hurts(ranking, rel, i):
    ranking = list(ranking)
    if ranking[i] not in rel:
        return
    better = ranking[:]
    better[i - 1], better[i] = better[i], better[i - 1]
    gains = {d: 1 for d in rel}
    assert reciprocal_rank(better, rel) >= reciprocal_rank(ranking, rel)
    assert average_precision(better, rel) >= average_precision(ranking, rel) - 1e-12
    for k in (5, 15, 30):
        assert ndcg_at(better, gains, k) >= ndcg_at(ranking, gains, k) - 1e-12


def test_trec_round_trip(tmp_path):
    run, _ = _random_case(np.random.default_rng(1))
    run.tag = "mytag"
    run.write_trec(tmp_path / "r.trec")
    back = RankedRun.read_trec(tmp_path / "r.trec")
    assert back == run
    back.write_trec(tmp_path / "s.trec")
    assert (tmp_path / "r.trec").read_bytes() == (tmp_path / "s.trec").read_bytes()


def test_trec_errors(tmp_path):
    p = tmp_path / "bad.trec"
    p.write_text("q Q0 d 1 0.5\n")
    with pytest.raises(RunError):
        RankedRun.read_trec(p)
    p.write_text("q Q0 d 2 0.5 t\n")
    with pytest.raises(RunError):
        RankedRun.read_trec(p)
    with pytest.raises(RunError):
        RankedRun().add_query("q", [("a", 1.0), ("a", 0.5)])
    with pytest.raises(RunError):
        RankedRun().add_query("q", [("a", 0.1), ("b", 0.5)])


def test_self_comparison():
    run, qrels = _random_case(np.random.default_rng(2))
    rep = evaluate(run, qrels, baseline=run)
    assert all(v == 0.0 for v in rep.delta.values())
    assert not any(rep.marks.values())
    assert MetricsReport.from_json(rep.to_json()).mean == rep.mean
    assert "baseline" in report_table(rep)


def test_baseline_query_sets_must_match():
    run = RankedRun.from_scores({"q1": [("a", 1.0)]})
    other = RankedRun.from_scores({"q2": [("a", 1.0)]})
    with pytest.raises(RunError):
        evaluate(run, Qrels(), baseline=other)


@pytest.fixture(scope="module")
def rerank_setup():
    store = DocStore([(f"d{i}", f"word{i % 3} common text {i}") for i in range(8)])
    vocab = tok.build_vocab((t for _, t in store.items()), 60, min_freq=1)
    builder = InstanceBuilder(vocab, store, max_len=32)
    enc = Encoder.initialize(preset("toy", len(vocab), max_len=32), 0)
    cands = RankedRun.from_scores({"q1": [("d3", 5.0), ("d1", 4.0), ("d6", 3.0), ("d0", 2.0)],
                                   "q2": [("d2", 1.0), ("d7", 0.5)]}, tag="bm25")
    return enc, builder, cands, {"q1": "word1 text", "q2": "common"}


def test_zero_head_rerank_ties_by_docid(rerank_setup):
    enc, builder, cands, queries = rerank_setup
    enc = enc.copy()
    enc.params["relevance.weight"].data[:] = 0.0
    out = rerank(enc, queries, cands, builder)
    assert out.docids("q1") == ["d0", "d1", "d3", "d6"]
    assert all(s == 0.5 for _, s in out.rankings["q1"])


def test_rerank_is_permutation(rerank_setup):
    enc, builder, cands, queries = rerank_setup
    out = rerank(enc, queries, cands, builder)
    for q in cands.qids():
        assert sorted(out.docids(q)) == sorted(cands.docids(q))
    bad = RankedRun.from_scores({"q1": [("zz", 1.0)]})
    with pytest.raises(RunError):
        rerank(enc, queries, bad, builder)
