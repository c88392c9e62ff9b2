"""Corpora, click logs, qrels, and construction of training sequences.

Pair layout: ``[CLS] [Q] q1..qn [SEP] [D] d1..dm [SEP] [PAD]...``; segment 0
covers [CLS] through the first [SEP], segment 1 covers [D] through the last
[SEP], padding is segment 0.  Single-text layout (MLM pre-training):
``[CLS] t1..tm [SEP] [PAD]...``.
"""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tokenizer as tok
from .numerics import IGNORE_INDEX

log = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 256
DEFAULT_MAX_QUERY_TOKENS = 64
MLM_SCOPES = ("all-tokens", "query-only")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# stores and file formats


class DocStore:
    def __init__(self, items=()):
        self._text = {}
        self.ids = []
        for docid, text in items:
            self.add(docid, text)

    def add(self, docid, text):
        if not docid:
            raise DataError("empty docid")
        if docid in self._text:
            raise DataError(f"duplicate docid {docid!r}")
        self._text[docid] = text
        self.ids.append(docid)

    def __getitem__(self, docid):
        try:
            return self._text[docid]
        except KeyError:
            raise KeyError(f"unknown docid {docid!r}") from None

    def __contains__(self, docid):
        return docid in self._text

    def __len__(self):
        return len(self.ids)

    def items(self):
        return ((d, self._text[d]) for d in self.ids)

    @classmethod
    def load(cls, path):
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    store.add(str(obj["docid"]), str(obj["text"]))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad document record ({exc})") from None
        return store

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for docid, text in self.items():
                fh.write(json.dumps({"docid": docid, "text": text}, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class ClickLogEntry:
    qid: str
    query: str
    docid: str


def parse_clicklog_line(line, lineno, path="<clicklog>"):
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (3, 4) or not parts[0] or not parts[2]:
        raise DataError(f"{path}:{lineno}: expected qid<TAB>query<TAB>docid[<TAB>url]")
    return ClickLogEntry(parts[0], parts[1], parts[2])


def load_clicklog(path, doc_store, sample_rate=0.08, seed=0):
    """Read an ORCAS-style click log, keeping each line with probability ``sample_rate``.

    One uniform draw is consumed per non-blank line, so the kept subset is a
    function of (file, seed, rate).  Entries whose docid is not in
    ``doc_store`` are dropped and counted.
    """
    if not 0.0 < sample_rate <= 1.0:
        raise DataError(f"sample_rate must be in (0, 1], got {sample_rate}")
    rng = np.random.default_rng(seed)
    kept, unknown = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            entry = parse_clicklog_line(line, lineno, path)
            if rng.random() >= sample_rate:
                continue
            if entry.docid not in doc_store:
                unknown += 1
                continue
            kept.append(entry)
    if unknown:
        log.warning("%s: dropped %d click entries with unknown docids", path, unknown)
    return kept


def save_clicklog(entries, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(f"{e.qid}\t{e.query}\t{e.docid}\thttp://docs.invalid/{e.docid}\n")


def clicked_map(entries):
    out = defaultdict(set)
    for e in entries:
        out[e.qid].add(e.docid)
    return dict(out)


def load_queries(path):
    queries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t", 1)
            if len(parts) != 2 or not parts[0]:
                raise DataError(f"{path}:{lineno}: expected qid<TAB>query")
            queries[parts[0]] = parts[1]
    return queries


def save_queries(queries, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, text in queries.items():
            fh.write(f"{qid}\t{text}\n")


class Qrels:
    """Graded judgments; grade 2 (highly relevant) is collapsed to 1."""

    def __init__(self):
        self.original = {}
        self.grades = {}

    def add(self, qid, docid, grade):
        if grade not in (0, 1, 2):
            raise DataError(f"grade must be 0, 1 or 2, got {grade} for ({qid}, {docid})")
        self.original.setdefault(qid, {})[docid] = grade
        self.grades.setdefault(qid, {})[docid] = min(grade, 1)

    def qids(self):
        return list(self.grades)

    def relevant(self, qid):
        return {d for d, g in self.grades.get(qid, {}).items() if g > 0}

    def judgments(self, qid):
        return self.grades.get(qid, {})

    def __len__(self):
        return sum(len(v) for v in self.grades.values())

    def subset(self, qids):
        out = Qrels()
        for q in qids:
            for d, g in self.original.get(q, {}).items():
                out.add(q, d, g)
        return out

    @classmethod
    def load(cls, path):
        qrels = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 4:
                    raise DataError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
                try:
                    grade = int(parts[3])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-integer grade {parts[3]!r}") from None
                try:
                    qrels.add(parts[0], parts[2], grade)
                except DataError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
        return qrels

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for qid, docs in self.original.items():
                for docid, grade in docs.items():
                    fh.write(f"{qid} 0 {docid} {grade}\n")


# ---------------------------------------------------------------------------
# sequences


@dataclass
class InputSequence:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_targets: np.ndarray
    n_query: int = 0
    n_doc: int = 0
    layout: str = "pair"
    pair_label: int = None
    relevance_label: int = None
    qid: str = None
    docid: str = None

    @property
    def length(self):
        return int(self.attention_mask.sum())

    def query_positions(self):
        return np.arange(2, 2 + self.n_query)

    def doc_positions(self):
        start = 4 + self.n_query if self.layout == "pair" else 1
        return np.arange(start, start + self.n_doc)

    def validate(self):
        ids = self.token_ids
        n = self.length
        if not (ids[n:] == tok.PAD_ID).all() or not (self.attention_mask[:n] == 1).all():
            raise DataError("padding must be a suffix with attention mask 0")
        if self.layout == "pair":
            q, m = self.n_query, self.n_doc
            if n != 5 + q + m:
                raise DataError("length does not match the pair template")
            fixed = {0: tok.CLS_ID, 1: tok.Q_ID, 2 + q: tok.SEP_ID, 3 + q: tok.D_ID, n - 1: tok.SEP_ID}
            for pos, want in fixed.items():
                if ids[pos] != want:
                    raise DataError(f"position {pos} should hold token id {want}")
            seg = np.zeros_like(self.segment_ids)
            seg[3 + q:n] = 1
            if not (self.segment_ids == seg).all():
                raise DataError("segment ids do not follow the pair template")
            if (self.pair_label is None) == (self.relevance_label is None):
                raise DataError("exactly one of pair_label / relevance_label must be set")
        else:
            if n != self.n_doc + 2 or ids[0] != tok.CLS_ID or ids[n - 1] != tok.SEP_ID:
                raise DataError("single-text sequence does not follow [CLS] .. [SEP]")
            if self.segment_ids.any():
                raise DataError("single-text sequences use segment 0 only")
        content = np.zeros(len(ids), dtype=bool)
        if self.layout == "pair":
            content[self.query_positions()] = True
        content[self.doc_positions()] = True
        targeted = self.mlm_targets != IGNORE_INDEX
        if (targeted & ~content).any():
            raise DataError("MLM targets outside query/document content")
        if (self.mlm_targets[targeted] < tok.N_SPECIAL).any():
            raise DataError("MLM target is a special token")
        return self


def _pad(ids, segs, max_len):
    n = len(ids)
    token_ids = np.zeros(max_len, dtype=np.int64)
    token_ids[:n] = ids
    segment_ids = np.zeros(max_len, dtype=np.int64)
    segment_ids[:n] = segs
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return token_ids, segment_ids, mask


def sequence_from_ids(query_ids, doc_ids, max_len=DEFAULT_MAX_LEN,
                      max_query_tokens=DEFAULT_MAX_QUERY_TOKENS, qid=None, docid=None):
    nq = len(query_ids)
    if nq == 0:
        raise DataError(f"query {qid!r} is empty after tokenization")
    if nq > max_query_tokens:
        raise DataError(f"query {qid!r} has {nq} tokens, above max_query_tokens={max_query_tokens}")
    room = max_len - 5 - nq
    if room < 0:
        raise DataError(f"query {qid!r} does not fit in max_len={max_len}")
    doc_ids = list(doc_ids[:room])
    ids = [tok.CLS_ID, tok.Q_ID, *query_ids, tok.SEP_ID, tok.D_ID, *doc_ids, tok.SEP_ID]
    segs = [0] * (nq + 3) + [1] * (len(doc_ids) + 2)
    t, s, m = _pad(ids, segs, max_len)
    return InputSequence(t, s, m, np.full(max_len, IGNORE_INDEX, dtype=np.int64),
                         n_query=nq, n_doc=len(doc_ids), qid=qid, docid=docid)


def build_sequence(query, doc, vocab, max_len=DEFAULT_MAX_LEN,
                   max_query_tokens=DEFAULT_MAX_QUERY_TOKENS, qid=None, docid=None):
    """Tokenize a query/document pair into the padded pair template.

    Only the document is truncated; an over-long query is an error.
    """
    return sequence_from_ids(tok.encode(query, vocab), tok.encode(doc, vocab), max_len,
                             max_query_tokens, qid=qid, docid=docid)


def single_sequence(doc_ids, max_len=DEFAULT_MAX_LEN, docid=None):
    doc_ids = list(doc_ids[: max_len - 2])
    ids = [tok.CLS_ID, *doc_ids, tok.SEP_ID]
    t, s, m = _pad(ids, [0] * len(ids), max_len)
    return InputSequence(t, s, m, np.full(max_len, IGNORE_INDEX, dtype=np.int64),
                         n_doc=len(doc_ids), layout="single", docid=docid)


def apply_mlm_mask(seq, rate, scope="all-tokens", rng=None):
    """Replace eligible tokens with [MASK] independently with probability ``rate``.

    Eligible = non-special content tokens (query only, or query and document).
    If no position is drawn, the draw is repeated.
    """
    if not 0.0 < rate < 1.0:
        raise DataError(f"mask rate must be in (0, 1), got {rate}")
    if scope not in MLM_SCOPES:
        raise DataError(f"unknown MLM scope {scope!r}")
    if scope == "query-only" and seq.layout != "pair":
        raise DataError("query-only masking needs a query/document pair")
    positions = seq.query_positions() if seq.layout == "pair" else np.array([], dtype=np.int64)
    if scope == "all-tokens":
        positions = np.concatenate([positions, seq.doc_positions()])
    positions = positions[seq.token_ids[positions] >= tok.N_SPECIAL]
    if positions.size == 0:
        raise DataError("no maskable positions in sequence")
    while True:
        hit = rng.random(positions.size) < rate
        if hit.any():
            break
    chosen = positions[hit]
    ids = seq.token_ids.copy()
    targets = np.full_like(seq.mlm_targets, IGNORE_INDEX)
    targets[chosen] = ids[chosen]
    ids[chosen] = tok.MASK_ID
    return replace(seq, token_ids=ids, mlm_targets=targets)


@dataclass
class InstanceBuilder:
    """Tokenizes documents once and turns click/qrels records into sequences."""

    vocab: tok.Vocabulary
    doc_store: DocStore
    max_len: int = DEFAULT_MAX_LEN
    max_query_tokens: int = DEFAULT_MAX_QUERY_TOKENS
    _doc_cache: dict = field(default_factory=dict, repr=False)
    _query_cache: dict = field(default_factory=dict, repr=False)

    def doc_ids(self, docid):
        ids = self._doc_cache.get(docid)
        if ids is None:
            ids = tok.encode(self.doc_store[docid], self.vocab)
            self._doc_cache[docid] = ids
        return ids

    def query_ids(self, text):
        ids = self._query_cache.get(text)
        if ids is None:
            ids = tok.encode(text, self.vocab)
            self._query_cache[text] = ids
        return ids

    def pair(self, query, docid, qid=None):
        return sequence_from_ids(self.query_ids(query), self.doc_ids(docid), self.max_len,
                                 self.max_query_tokens, qid=qid, docid=docid)

    def single(self, docid):
        return single_sequence(self.doc_ids(docid), self.max_len, docid=docid)


def sample_negative(doc_store, excluded, rng, max_tries=64):
    """Uniform docid from the store that is not in ``excluded``."""
    ids = doc_store.ids
    if len(ids) < 2:
        raise DataError("negative sampling needs at least two documents")
    for _ in range(max_tries):
        d = ids[int(rng.integers(len(ids)))]
        if d not in excluded:
            return d
    eligible = [d for d in ids if d not in excluded]
    if not eligible:
        raise DataError("every document is clicked for this query; no negative available")
    return eligible[int(rng.integers(len(eligible)))]


def make_qdpp_instance(entry, builder, clicked, p_ispair=0.5, rng=None):
    """IsPair with the clicked document, or NotPair with a random unclicked one."""
    from .model import IS_PAIR, NOT_PAIR

    if rng.random() < p_ispair:
        seq = builder.pair(entry.query, entry.docid, qid=entry.qid)
        seq.pair_label = IS_PAIR
    else:
        neg = sample_negative(builder.doc_store, clicked.get(entry.qid, {entry.docid}), rng)
        seq = builder.pair(entry.query, neg, qid=entry.qid)
        seq.pair_label = NOT_PAIR
    return seq


def make_finetune_instances(qrels, queries, builder, qids=None):
    """One labelled sequence per resolvable (qid, docid) judgment.

    Returns ``(instances, skipped)``; unresolvable judgments are skipped and counted.
    """
    instances, skipped = [], 0
    for qid in (qrels.qids() if qids is None else qids):
        for docid, grade in qrels.judgments(qid).items():
            if qid not in queries or docid not in builder.doc_store:
                skipped += 1
                continue
            seq = builder.pair(queries[qid], docid, qid=qid)
            seq.relevance_label = grade
            instances.append(seq)
    if skipped:
        log.warning("skipped %d unresolvable judgments", skipped)
    return instances, skipped


def fold_split(qids, k):
    """Sort qids and deal them round-robin into ``k`` folds."""
    qids = sorted(set(qids))
    if k < 2:
        raise DataError("need at least two folds")
    if k > len(qids):
        raise DataError(f"cannot split {len(qids)} queries into {k} folds")
    return [qids[i::k] for i in range(k)]


def collate(seqs, trim=True):
    """Stack sequences into batch arrays, dropping all-padding trailing columns."""
    ids = np.stack([s.token_ids for s in seqs])
    segs = np.stack([s.segment_ids for s in seqs])
    mask = np.stack([s.attention_mask for s in seqs])
    targets = np.stack([s.mlm_targets for s in seqs])
    if trim:
        t = int(mask.sum(axis=1).max())
        ids, segs, mask, targets = ids[:, :t], segs[:, :t], mask[:, :t], targets[:, :t]
    return ids, segs, mask, targets
