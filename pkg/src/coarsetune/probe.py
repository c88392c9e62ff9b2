"""Query-prediction probe: mask the query slot of a document and read the MLM head.

The probe builds ``[CLS] [Q] [MASK]*n [SEP] [D] doc [SEP]``, runs one
forward pass and lists the top-k vocabulary tokens at each masked position.
Nothing is recorded for gradients, so the weights are left untouched.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import DEFAULT_MAX_LEN, DataError, sequence_from_ids
from .numerics import softmax_np
from .tokenizer import CONT, MASK_ID, encode

DEFAULT_N_MASKS = 3
DEFAULT_TOP_K = 5


class ProbeError(ValueError):
    pass


@dataclass
class ProbeResult:
    """``positions[i]`` is the ranked ``[(token, prob)]`` list for q̂_{i+1}."""

    positions: list

    def top_tokens(self, i=None):
        rows = self.positions if i is None else [self.positions[i]]
        return [tok for row in rows for tok, _ in row]

    def to_dict(self):
        return {"positions": [[{"token": t, "prob": p} for t, p in row] for row in self.positions]}

    @classmethod
    def from_dict(cls, d):
        return cls([[(e["token"], float(e["prob"])) for e in row] for row in d["positions"]])


def predict_query(encoder, doc_text, vocab, n_masks=DEFAULT_N_MASKS, top_k=DEFAULT_TOP_K,
                  max_len=None):
    if n_masks < 1:
        raise ProbeError("n_masks must be at least 1")
    if not 1 <= top_k <= len(vocab):
        raise ProbeError(f"top_k must be in 1..{len(vocab)}")
    if encoder.config.vocab_size != len(vocab):
        raise ProbeError("checkpoint vocabulary size does not match the vocabulary")
    doc_ids = encode(doc_text, vocab)
    if not doc_ids:
        raise ProbeError("document is empty after tokenization")
    max_len = max_len or min(encoder.config.max_len, DEFAULT_MAX_LEN)
    try:
        seq = sequence_from_ids([MASK_ID] * n_masks, doc_ids, max_len=max_len)
    except DataError as exc:
        raise ProbeError(str(exc)) from None
    n = seq.length
    hidden = encoder.hidden_states(seq.token_ids[:n], seq.segment_ids[:n], seq.attention_mask[:n])
    positions = list(range(2, 2 + n_masks))
    probs = softmax_np(encoder.mlm_logits(hidden, positions).data)
    out = []
    for row in probs:
        # stable sort on -p keeps ascending token id among ties
        order = np.argsort(-row, kind="stable")[:top_k]
        out.append([(vocab.tokens[j], float(row[j])) for j in order])
    return ProbeResult(out)


def probe_report(results, labels=None, title=None):
    """Side-by-side text table, one column group per checkpoint, rows Top1..Topk."""
    if not results:
        raise ProbeError("nothing to report")
    labels = labels or [f"ckpt{i}" for i in range(len(results))]
    n_pos = len(results[0].positions)
    k = len(results[0].positions[0])
    if any(len(r.positions) != n_pos or any(len(row) != k for row in r.positions) for r in results):
        raise ProbeError("probe results differ in shape")
    cells = [[f"{tok} {p:.3f}" for tok, p in row] for r in results for row in r.positions]
    width = max([len(c) for col in cells for c in col] + [len(lab) for lab in labels] + [6])
    heads = [f"q{i + 1}" for i in range(n_pos)]
    lines = [title] if title else []
    lines.append("     " + " | ".join(f"{lab:^{width * n_pos + 2 * (n_pos - 1)}}" for lab in labels))
    lines.append("     " + " | ".join("  ".join(f"{h:<{width}}" for h in heads) for _ in labels))
    for j in range(k):
        row = " | ".join("  ".join(f"{r.positions[i][j][0] + ' ' + format(r.positions[i][j][1], '.3f'):<{width}}"
                                   for i in range(n_pos)) for r in results)
        lines.append(f"Top{j + 1:<2} {row}")
    return "\n".join(lines) + "\n"


def report_json(results, labels):
    return json.dumps({"checkpoints": [dict(label=lab, **r.to_dict()) for lab, r in zip(labels, results)]},
                      indent=2, ensure_ascii=False) + "\n"


def parse_report_json(text):
    d = json.loads(text)
    return ([c["label"] for c in d["checkpoints"]],
            [ProbeResult.from_dict(c) for c in d["checkpoints"]])


def continuation_rate(results, position=0):
    """Fraction of results whose top-1 token at ``position`` is a ``##`` piece."""
    if not results:
        return 0.0
    return sum(r.positions[position][0][0].startswith(CONT) for r in results) / len(results)


def query_hit(result, query, vocab):
    """True if any top-k token at any position is a token of ``query``."""
    targets = {vocab.tokens[i] for i in encode(query, vocab)}
    return any(tok in targets for tok in result.top_tokens())


def hit_rate(encoder, docs, vocab, n_masks=DEFAULT_N_MASKS, top_k=DEFAULT_TOP_K):
    """Share of ``(doc_text, query)`` pairs whose top-k predictions contain a query token."""
    if not docs:
        return 0.0
    hits = sum(query_hit(predict_query(encoder, text, vocab, n_masks, top_k), q, vocab)
               for text, q in docs)
    return hits / len(docs)
