"""BM25 first-stage retrieval over an in-memory inverted index."""

import json
import math
import struct
from collections import Counter

import numpy as np

from . import _accel
from .tokenizer import basic_split

INDEX_MAGIC = b"CTIX"
INDEX_VERSION = 1
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_DEPTH = 1000


class IndexFormatError(ValueError):
    pass


class InvertedIndex:
    """Postings per term as parallel arrays ``(docnums, tfs)``.

    Internal document numbers follow sorted docid order, so postings sorted
    by docnum are also sorted by docid.
    """

    def __init__(self, docids, doc_len, postings):
        self.docids = list(docids)
        self.docnum = {d: i for i, d in enumerate(self.docids)}
        self.doc_len = np.asarray(doc_len, dtype=np.int64)
        self.postings = postings
        self.N = len(self.docids)
        self.avglen = float(self.doc_len.sum()) / self.N if self.N else 0.0

    def df(self, term):
        p = self.postings.get(term)
        return 0 if p is None else int(p[0].size)

    def idf(self, term):
        df = self.df(term)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def tf(self, term, docid):
        p = self.postings.get(term)
        if p is None:
            return 0
        i = np.searchsorted(p[0], self.docnum[docid])
        return int(p[1][i]) if i < p[0].size and p[0][i] == self.docnum[docid] else 0

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        if self.docids != other.docids or not np.array_equal(self.doc_len, other.doc_len):
            return False
        if self.postings.keys() != other.postings.keys():
            return False
        return all(np.array_equal(a[0], other.postings[t][0]) and np.array_equal(a[1], other.postings[t][1])
                   for t, a in self.postings.items())

    def save(self, path):
        terms = sorted(self.postings)
        blobs, table, offset = [], [], 0
        for t in terms:
            docnums, tfs = self.postings[t]
            gaps = np.diff(docnums, prepend=0)
            blob = _accel.varint_encode(gaps).tobytes() + _accel.varint_encode(tfs).tobytes()
            table.append([t, int(docnums.size), offset, len(blob)])
            blobs.append(blob)
            offset += len(blob)
        lens = _accel.varint_encode(self.doc_len).tobytes()
        header = json.dumps({"N": self.N, "avglen": self.avglen, "docids": self.docids,
                             "doc_len_bytes": len(lens), "terms": table},
                            ensure_ascii=False).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<IQ", INDEX_VERSION, len(header)))
            fh.write(header)
            fh.write(lens)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 16 or blob[:4] != INDEX_MAGIC:
            raise IndexFormatError(f"{path}: not an index file (bad magic)")
        version, hlen = struct.unpack_from("<IQ", blob, 4)
        if version != INDEX_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        try:
            header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        except ValueError as exc:
            raise IndexFormatError(f"{path}: malformed header: {exc}") from None
        body = np.frombuffer(blob, dtype=np.uint8, offset=16 + hlen)
        n_len = header["doc_len_bytes"]
        doc_len, used = _accel.varint_decode(body[:n_len], header["N"])
        if used != n_len:
            raise IndexFormatError(f"{path}: corrupt document-length block")
        base = n_len
        postings = {}
        for term, df, off, nbytes in header["terms"]:
            chunk = body[base + off: base + off + nbytes]
            if chunk.size != nbytes:
                raise IndexFormatError(f"{path}: truncated postings for {term!r}")
            gaps, used = _accel.varint_decode(chunk, df)
            tfs, used2 = _accel.varint_decode(chunk[used:], df)
            if used + used2 != nbytes:
                raise IndexFormatError(f"{path}: corrupt postings for {term!r}")
            postings[term] = (np.cumsum(gaps), tfs)
        index = cls(header["docids"], doc_len, postings)
        if index.avglen != header["avglen"]:
            raise IndexFormatError(f"{path}: stored average length does not match document lengths")
        return index


def build_index(doc_store):
    """Index word-level tokens (lowercase, punctuation split, no subwords)."""
    if len(doc_store) == 0:
        raise IndexFormatError("cannot index an empty document store")
    docids = sorted(doc_store.ids)
    doc_len = np.zeros(len(docids), dtype=np.int64)
    acc = {}
    for n, docid in enumerate(docids):
        counts = Counter(basic_split(doc_store[docid]))
        doc_len[n] = sum(counts.values())
        for term, c in counts.items():
            acc.setdefault(term, ([], []))
            acc[term][0].append(n)
            acc[term][1].append(c)
    postings = {t: (np.array(d, dtype=np.int64), np.array(c, dtype=np.int64)) for t, (d, c) in acc.items()}
    return InvertedIndex(docids, doc_len, postings)


def query_terms(query):
    return basic_split(query) if isinstance(query, str) else list(query)


def bm25_score(query, docid, index, k1=DEFAULT_K1, b=DEFAULT_B):
    """Okapi BM25 of one document; ``query`` is text or a list of terms."""
    if docid not in index.docnum:
        raise KeyError(f"unknown docid {docid!r}")
    dl = index.doc_len[index.docnum[docid]]
    score = 0.0
    for term in query_terms(query):
        tf = index.tf(term, docid)
        if tf == 0:
            continue
        score += index.idf(term) * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / index.avglen))
    return score


def score_all(query, index, k1=DEFAULT_K1, b=DEFAULT_B):
    scores = np.zeros(index.N)
    for term in query_terms(query):
        p = index.postings.get(term)
        if p is None:
            continue
        _accel.bm25_accumulate(scores, p[0], p[1], index.doc_len, index.avglen,
                               index.idf(term), k1, b)
    return scores


def search(query, index, k=DEFAULT_DEPTH, k1=DEFAULT_K1, b=DEFAULT_B):
    """Top-``k`` ``(docid, score)`` by descending score, ties by ascending docid."""
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = score_all(query, index, k1, b)
    hits = np.nonzero(scores > 0.0)[0]
    order = hits[np.lexsort((hits, -scores[hits]))][:k]
    return [(index.docids[i], float(scores[i])) for i in order]
