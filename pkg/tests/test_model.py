import numpy as np
import pytest

from coarsetune.data import collate, sequence_from_ids
from coarsetune.model import (CheckpointError, CheckpointMeta, Encoder, ModelConfig, SequenceTooLong,
                              load_checkpoint, param_shapes, preset, relevance_score, save_checkpoint)

from helpers import gradcheck_model_sequences, model_gradcheck, tiny_encoder


@pytest.mark.parametrize("stage,kw", [("pretrain", {}), ("coarse", {"w_mlm": 0.0}), ("finetune", {})],
                         ids=["mlm", "qdpp", "relevance"])
def test_full_model_gradcheck(stage, kw):
    worst = model_gradcheck(stage, **kw)
    assert max(worst.values()) < 1e-4, sorted(worst.items(), key=lambda kv: -kv[1])[:3]


def _batch(seed=0, n=3):
    return collate(gradcheck_model_sequences(np.random.default_rng(seed), n=n))


def test_attention_rows_sum_to_one():
    enc = tiny_encoder()
    ids, segs, mask, _ = _batch()
    for layer in range(enc.config.n_layers):
        probs = enc.attention_probs(ids, segs, mask, layer)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        b, j = np.nonzero(mask == 0)
        assert (probs[b, :, :, j] < 1e-12).all()
    with pytest.raises(IndexError):
        enc.attention_probs(ids, segs, mask, enc.config.n_layers)


def test_padding_does_not_change_real_positions():
    enc = tiny_encoder()
    seq = sequence_from_ids([10, 11], [12, 13, 14], max_len=16)
    n = seq.length
    short = enc.hidden_states(seq.token_ids[:n], seq.segment_ids[:n], seq.attention_mask[:n]).data
    full = enc.hidden_states(seq.token_ids, seq.segment_ids, seq.attention_mask).data
    np.testing.assert_allclose(full[:n], short, atol=1e-12)


def test_forward_deterministic():
    enc = tiny_encoder()
    ids, segs, mask, _ = _batch()
    a = enc.hidden_states(ids, segs, mask).data
    b = enc.hidden_states(ids, segs, mask).data
    assert a.tobytes() == b.tobytes()


def test_heads_share_trunk():
    enc = tiny_encoder()
    ids, segs, mask, _ = _batch()

    def outputs():
        h = enc.hidden_states(ids, segs, mask)
        return (enc.mlm_logits(h, (np.array([0]), np.array([3]))).data.copy(),
                enc.qdpp_logits(h).data.copy(), enc.relevance_logits(h).data.copy())

    before = outputs()
    w = enc.params["layers.0.ffn.in.weight"]
    w.data = w.data + np.random.default_rng(1).normal(size=w.shape)
    after = outputs()
    for x, y in zip(before, after):
        assert not np.allclose(x, y)


def test_zero_heads_give_half():
    enc = tiny_encoder()
    enc.params["qdpp.weight"].data[:] = 0.0
    enc.params["relevance.weight"].data[:] = 0.0
    ids, segs, mask, _ = _batch()
    h = enc.hidden_states(ids, segs, mask)
    np.testing.assert_array_equal(enc.qdpp_logits(h).data, 0.0)
    np.testing.assert_array_equal(relevance_score(enc.relevance_logits(h).data), 0.5)


def test_no_masked_positions():
    enc = tiny_encoder()
    ids, segs, mask, _ = _batch()
    h = enc.hidden_states(ids[0], segs[0], mask[0])
    assert enc.mlm_logits(h, []).shape == (0, enc.config.vocab_size)


def test_too_long_and_bad_ids():
    enc = tiny_encoder()
    with pytest.raises(SequenceTooLong):
        enc.hidden_states(np.full(17, 7), np.zeros(17), np.ones(17))
    with pytest.raises(IndexError):
        enc.hidden_states(np.full(4, 50), np.zeros(4), np.ones(4))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=3)
    with pytest.raises(ValueError):
        preset("huge", 10)


def test_manifest_counts():
    cfg = preset("gradcheck", 50)
    shapes = param_shapes(cfg)
    assert shapes["embeddings.token"] == (50, 8)
    assert shapes["qdpp.weight"] == (8, 2) and shapes["relevance.weight"] == (8, 2)
    assert "qdpp.bias" not in shapes


def test_checkpoint_round_trip(tmp_path):
    enc = tiny_encoder(seed=3)
    meta = CheckpointMeta(stage="coarse", seeds=[0, 1], epoch=2, extra={"note": "x"})
    path = tmp_path / "m.ckpt"
    save_checkpoint(enc, meta, path)
    enc2, meta2 = load_checkpoint(path)
    assert meta2 == meta and enc2.config == enc.config
    for k, p in enc.params.items():
        assert p.data.tobytes() == enc2.params[k].data.tobytes()
    save_checkpoint(enc2, meta2, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_encoder(), CheckpointMeta(), path)
    blob = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(bytes(blob[:-8]))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_checkpoint_vocab_mismatch(tmp_path):
    from coarsetune.tokenizer import SPECIAL_TOKENS, Vocabulary
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_encoder(), CheckpointMeta(), path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, vocab=Vocabulary(list(SPECIAL_TOKENS) + ["a"]))


def test_unknown_stage():
    with pytest.raises(CheckpointError):
        CheckpointMeta(stage="bogus")


def test_dropout_only_with_rng():
    enc = Encoder.initialize(preset("gradcheck", 50, dropout=0.5), 0)
    ids, segs, mask, _ = _batch()
    a = enc.hidden_states(ids, segs, mask).data
    b = enc.hidden_states(ids, segs, mask, rng=np.random.default_rng(0)).data
    assert not np.allclose(a, b)


def test_relevance_head_copy_from_qdpp():
    enc = tiny_encoder()
    enc.reset_relevance_head(from_qdpp=True)
    np.testing.assert_array_equal(enc.params["relevance.weight"].data, enc.params["qdpp.weight"].data)
