"""Topic-structured synthetic corpus with planted queries, clicks and qrels.

Documents mix words from one topic with shared background words, plus a few
rare signature words of their own.  A query is one signature word and 1-3
salient topic words taken from one source document; that document is the
click target (click log) or the relevant judgment (qrels).  Judged
queries also get same-topic distractor documents graded 0.  Click-log source
documents are disjoint from judged source documents so that coarse-tuning
never sees an evaluation query's answer.
"""

import math
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import ClickLogEntry, DocStore, Qrels, save_clicklog, save_queries

_ONSETS = list("bdfgklmnprstvz") + ["ch", "sh", "tr", "pl", "br", "st"]
_VOWELS = list("aeiou") + ["ai", "ou", "ea"]
_CODAS = ["", "", "", "n", "r", "s", "l", "x", "th"]


@dataclass
class SyntheticCorpus:
    docs: DocStore
    clicklog: list
    queries: dict
    qrels: Qrels
    doc_topic: dict
    topic_words: list

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        paths = {
            "docs": os.path.join(directory, "docs.jsonl"),
            "clicklog": os.path.join(directory, "clicklog.tsv"),
            "queries": os.path.join(directory, "queries.tsv"),
            "qrels": os.path.join(directory, "qrels.txt"),
        }
        self.docs.save(paths["docs"])
        save_clicklog(self.clicklog, paths["clicklog"])
        save_queries(self.queries, paths["queries"])
        self.qrels.save(paths["qrels"])
        return paths


def _make_words(rng, n):
    words, seen = [], set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        w += _CODAS[rng.integers(len(_CODAS))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _zipf(n, s):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _query_from(doc_words, topic_set, signature, df, n_docs, rng):
    tf = Counter(w for w in doc_words if w in topic_set)
    if not tf:
        tf = Counter(doc_words)
    cands = sorted(tf, key=lambda w: (-tf[w] * math.log(n_docs / df[w]), w))[:6]
    k = min(int(rng.integers(1, 4)), len(cands))
    picked = [cands[i] for i in rng.choice(len(cands), size=k, replace=False)]
    if signature:
        picked.insert(int(rng.integers(k + 1)), signature[int(rng.integers(len(signature)))])
    return " ".join(picked)


def generate_synthetic_corpus(n_docs=2000, n_queries=250, vocab_words=600, seed=0,
                              n_clicks=500, n_topics=20, n_distractors=4,
                              doc_len=(30, 60), topic_share=0.5, n_signature=2,
                              signature_repeats=3):
    """Build a corpus; returns a :class:`SyntheticCorpus`.  Pure in ``seed``.

    Topic words are exclusive to their topic.  Signature words come from a
    separate pool of ``n_docs`` rare words; each document draws
    ``n_signature`` of them and repeats each ``signature_repeats`` times.
    """
    if min(n_docs, n_queries, vocab_words, n_topics) < 1 or n_clicks < 0:
        raise ValueError("corpus parameters must be positive")
    if n_signature < 0 or signature_repeats < 1:
        raise ValueError("signature parameters must be non-negative")
    if n_queries > n_docs:
        raise ValueError("need at least as many documents as judged queries")
    rng = np.random.default_rng(seed)
    words = _make_words(rng, vocab_words + n_docs)
    rare, words = words[vocab_words:], words[:vocab_words]
    n_bg = max(1, vocab_words // 4)
    background, pool = words[:n_bg], words[n_bg:]
    per_topic = len(pool) // n_topics
    if per_topic < 2:
        raise ValueError("too few topic words per topic; raise vocab_words or lower n_topics")
    topic_words = [pool[k * per_topic:(k + 1) * per_topic] for k in range(n_topics)]
    bg_p = _zipf(len(background), 1.0)
    tp_p = _zipf(per_topic, 0.8)

    docs = DocStore()
    doc_topic, doc_words, doc_sig = {}, {}, {}
    width = len(str(n_docs - 1))
    for i in range(n_docs):
        t = int(rng.integers(n_topics))
        n = int(rng.integers(doc_len[0], doc_len[1] + 1))
        from_topic = rng.random(n) < topic_share
        tw = rng.choice(per_topic, size=n, p=tp_p)
        bw = rng.choice(len(background), size=n, p=bg_p)
        toks = [topic_words[t][a] if ft else background[b] for ft, a, b in zip(from_topic, tw, bw)]
        sig = [rare[j] for j in rng.choice(len(rare), size=min(n_signature, len(rare)), replace=False)]
        for w in sig * signature_repeats:
            toks.insert(int(rng.integers(len(toks) + 1)), w)
        sentences, j = [], 0
        while j < len(toks):
            step = int(rng.integers(8, 13))
            sentences.append(" ".join(toks[j:j + step]) + ".")
            j += step
        docid = f"d{i:0{width}d}"
        docs.add(docid, " ".join(sentences))
        doc_topic[docid] = t
        doc_words[docid] = toks
        doc_sig[docid] = sig

    df = Counter()
    for toks in doc_words.values():
        df.update(set(toks))
    by_topic = {}
    for d, t in doc_topic.items():
        by_topic.setdefault(t, []).append(d)

    order = [docs.ids[i] for i in rng.permutation(n_docs)]
    judged_src = order[:n_queries]
    queries, qrels = {}, Qrels()
    qwidth = len(str(n_queries - 1))
    for i, src in enumerate(judged_src):
        qid = f"q{i:0{qwidth}d}"
        t = doc_topic[src]
        queries[qid] = _query_from(doc_words[src], set(topic_words[t]), doc_sig[src], df, n_docs, rng)
        qrels.add(qid, src, 1)
        same = [d for d in by_topic[t] if d != src]
        k = min(n_distractors, len(same))
        for j in rng.choice(len(same), size=k, replace=False):
            qrels.add(qid, same[j], 0)

    click_pool = order[n_queries:] or order
    clicks = []
    cwidth = len(str(max(n_clicks - 1, 0)))
    for i in range(n_clicks):
        src = click_pool[int(rng.integers(len(click_pool)))]
        t = doc_topic[src]
        text = _query_from(doc_words[src], set(topic_words[t]), doc_sig[src], df, n_docs, rng)
        clicks.append(ClickLogEntry(f"c{i:0{cwidth}d}", text, src))

    return SyntheticCorpus(docs, clicks, queries, qrels, doc_topic, topic_words)
