import pytest

from coarsetune import tokenizer as tok
from coarsetune.model import Encoder, preset
from coarsetune.probe import (ProbeError, ProbeResult, continuation_rate, hit_rate, parse_report_json,
                              predict_query, probe_report, query_hit, report_json)


DOC = "the river bank was flooded after heavy rain near the old bridge"


@pytest.fixture(scope="module")
def setup():
    vocab = tok.build_vocab([DOC, "heavy rain and rivers", "old bridges of the river"], 80, min_freq=1)
    enc = Encoder.initialize(preset("toy", len(vocab), max_len=48), 0)
    return enc, vocab


def test_shape_and_order(setup):
    enc, vocab = setup
    res = predict_query(enc, DOC, vocab, n_masks=3, top_k=5)
    assert len(res.positions) == 3 and all(len(row) == 5 for row in res.positions)
    for row in res.positions:
        probs = [p for _, p in row]
        assert probs == sorted(probs, reverse=True) and all(0 <= p <= 1 for p in probs)


def test_read_only_and_deterministic(setup):
    enc, vocab = setup
    before = {k: p.data.tobytes() for k, p in enc.params.items()}
    a = predict_query(enc, DOC, vocab)
    b = predict_query(enc, DOC, vocab)
    assert a == b
    assert before == {k: p.data.tobytes() for k, p in enc.params.items()}


def test_tie_break_by_id(setup):
    enc, vocab = setup
    flat = enc.copy()
    flat.params["mlm.output_bias"].data[:] = 0.0
    flat.params["embeddings.token"].data[:] = 0.0
    res = predict_query(flat, DOC, vocab, n_masks=1, top_k=3)
    assert [t for t, _ in res.positions[0]] == vocab.tokens[:3]


def test_errors(setup):
    enc, vocab = setup
    with pytest.raises(ProbeError):
        predict_query(enc, DOC, vocab, n_masks=0)
    with pytest.raises(ProbeError):
        predict_query(enc, DOC, vocab, top_k=len(vocab) + 1)
    with pytest.raises(ProbeError):
        predict_query(enc, "", vocab)
    other = tok.Vocabulary(list(tok.SPECIAL_TOKENS) + ["a"])
    with pytest.raises(ProbeError):
        predict_query(enc, "a", other)


def test_report_layout(setup):
    enc, vocab = setup
    res = predict_query(enc, DOC, vocab, n_masks=2, top_k=3)
    single = probe_report([res], ["pre"])
    lines = single.splitlines()
    assert "pre" in lines[0] and lines[1].split() == ["q1", "q2"]
    assert [ln.split()[0] for ln in lines[2:]] == ["Top1", "Top2", "Top3"]
    double = probe_report([res, res], ["pre", "coarse"], title="doc")
    assert double.splitlines()[0] == "doc" and double.count("|") == 5
    with pytest.raises(ProbeError):
        probe_report([])


def test_json_round_trip(setup):
    enc, vocab = setup
    res = predict_query(enc, DOC, vocab)
    labels, back = parse_report_json(report_json([res], ["x"]))
    assert labels == ["x"] and back[0] == ProbeResult.from_dict(res.to_dict())


def test_continuation_rate_and_hits(setup):
    enc, vocab = setup
    r1 = ProbeResult([[("##er", 0.5), ("river", 0.2)]])
    r2 = ProbeResult([[("river", 0.5), ("##er", 0.2)]])
    assert continuation_rate([r1, r2]) == 0.5 and continuation_rate([]) == 0.0
    assert query_hit(r2, "river crossing", vocab)
    assert not query_hit(ProbeResult([[("bank", 0.9)]]), "rain", vocab)
    rate = hit_rate(enc, [(DOC, "heavy rain")], vocab)
    assert rate in (0.0, 1.0)
    assert hit_rate(enc, [], vocab) == 0.0
