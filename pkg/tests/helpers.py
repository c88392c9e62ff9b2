"""Shared oracles for the test suite."""

import numpy as np

from coarsetune import numerics as nx
from coarsetune.data import apply_mlm_mask, sequence_from_ids
from coarsetune.model import Encoder, preset
from coarsetune.train import batch_loss, default_plan

FD_STEP = 1e-5


def numeric_grad(f, arr, h=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck_model_sequences(rng, vocab_size=50, n=3, max_len=16):
    """Pair sequences with query/doc ids drawn from the non-special range."""
    seqs = []
    for i in range(n):
        nq = int(rng.integers(1, 4))
        nd = int(rng.integers(2, max_len - 5 - nq + 1))
        q = rng.integers(7, vocab_size, size=nq).tolist()
        d = rng.integers(7, vocab_size, size=nd).tolist()
        s = apply_mlm_mask(sequence_from_ids(q, d, max_len=max_len), 0.3, rng=rng)
        s.pair_label = i % 2
        s.relevance_label = (i + 1) % 2
        seqs.append(s)
    return seqs


def tiny_encoder(seed=0, vocab_size=50):
    return Encoder.initialize(preset("gradcheck", vocab_size, init_std=0.3), seed)


def model_gradcheck(stage, seed=0, **plan_kw):
    """Max relative error of analytic vs finite-difference gradients over all parameters."""
    rng = np.random.default_rng(seed)
    enc = tiny_encoder(seed)
    seqs = gradcheck_model_sequences(rng)
    plan = default_plan(stage, **plan_kw)

    def loss_value():
        loss, _ = batch_loss(enc, seqs, plan)
        return loss.item()

    enc.zero_grad()
    with nx.Tape() as tape:
        loss, _ = batch_loss(enc, seqs, plan)
        tape.backward(loss)
    worst = {}
    for name, p in enc.params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numeric_grad(loss_value, p.data)
        worst[name] = rel_error(analytic, numeric)
    return worst


# -- brute-force ranking metrics, written independently of rankeval ------------

def bf_reciprocal_rank(ranking, rel):
    ranks = [i + 1 for i, d in enumerate(ranking) if d in rel]
    return 1.0 / min(ranks) if ranks else 0.0


def bf_average_precision(ranking, rel):
    if not rel:
        return 0.0
    precisions = []
    for i, d in enumerate(ranking):
        if d in rel:
            prefix = ranking[: i + 1]
            precisions.append(len([x for x in prefix if x in rel]) / len(prefix))
    return sum(precisions) / len(rel)


def bf_ndcg(ranking, gains, k):
    dcg = 0.0
    for i in range(min(k, len(ranking))):
        dcg += gains.get(ranking[i], 0) / np.log2(i + 2)
    ideal = sorted([g for g in gains.values() if g > 0], reverse=True)
    idcg = 0.0
    for i in range(min(k, len(ideal))):
        idcg += ideal[i] / np.log2(i + 2)
    return dcg / idcg if idcg else 0.0


# -- brute-force BM25 ---------------------------------------------------------

def bf_bm25(query_terms, docs_terms, k1=1.2, b=0.75):
    """Score every document by re-counting terms; ``docs_terms`` maps docid -> term list."""
    n = len(docs_terms)
    avg = sum(len(t) for t in docs_terms.values()) / n
    out = {}
    for docid, terms in docs_terms.items():
        s = 0.0
        for q in query_terms:
            tf = terms.count(q)
            if tf == 0:
                continue
            df = sum(1 for t in docs_terms.values() if q in t)
            idf = np.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(terms) / avg))
        out[docid] = s
    return out
