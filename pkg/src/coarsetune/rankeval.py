"""Re-ranking, TREC run files, ranking metrics and significance-marked reports."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import collate
from .model import relevance_score
from .stats import paired_ttest

DEFAULT_CUTOFFS = (5, 15, 30)
SIG_LEVELS = ((0.01, "*"), (0.05, "†"), (0.10, "‡"))


class RunError(ValueError):
    pass


class RankedRun:
    """Per-query ranked ``(docid, score)`` lists; rank is list position + 1."""

    def __init__(self, tag="run"):
        self.tag = tag
        self.rankings = {}

    def add_query(self, qid, ranked):
        ranked = [(str(d), float(s)) for d, s in ranked]
        seen = set()
        for i, (d, s) in enumerate(ranked):
            if d in seen:
                raise RunError(f"duplicate docid {d!r} for query {qid!r}")
            seen.add(d)
            if i and s > ranked[i - 1][1]:
                raise RunError(f"scores increase with rank for query {qid!r}")
        self.rankings[qid] = ranked

    @classmethod
    def from_scores(cls, scored, tag="run"):
        """Build from ``qid -> [(docid, score)]`` in any order; ties by ascending docid."""
        run = cls(tag)
        for qid, pairs in scored.items():
            run.add_query(qid, sorted(pairs, key=lambda p: (-p[1], p[0])))
        return run

    def qids(self):
        return list(self.rankings)

    def docids(self, qid):
        return [d for d, _ in self.rankings.get(qid, [])]

    def __eq__(self, other):
        return isinstance(other, RankedRun) and self.tag == other.tag and self.rankings == other.rankings

    def write_trec(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for qid, ranked in self.rankings.items():
                for rank, (docid, score) in enumerate(ranked, 1):
                    fh.write(f"{qid} Q0 {docid} {rank} {score!r} {self.tag}\n")

    @classmethod
    def read_trec(cls, path):
        rows, tag = {}, None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 6:
                    raise RunError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
                qid, _, docid, rank, score, t = parts
                tag = tag or t
                try:
                    rows.setdefault(qid, []).append((int(rank), docid, float(score)))
                except ValueError:
                    raise RunError(f"{path}:{lineno}: bad rank or score") from None
        run = cls(tag or "run")
        for qid, entries in rows.items():
            entries.sort()
            if [r for r, _, _ in entries] != list(range(1, len(entries) + 1)):
                raise RunError(f"{path}: ranks for query {qid!r} are not 1..n")
            run.add_query(qid, [(d, s) for _, d, s in entries])
        return run


# ---------------------------------------------------------------------------
# re-ranking


def score_pairs(encoder, seqs, batch_size=128):
    """P(relevant) for each sequence; no graph is recorded."""
    out = np.empty(len(seqs))
    for start in range(0, len(seqs), batch_size):
        batch = seqs[start:start + batch_size]
        ids, segs, mask, _ = collate(batch)
        hidden = encoder.hidden_states(ids, segs, mask)
        out[start:start + len(batch)] = relevance_score(encoder.relevance_logits(hidden).data)
    return out


def rerank(encoder, queries, candidates, builder, batch_size=128, tag="rerank"):
    """Re-score every candidate by P(relevant) and re-sort; the candidate sets are unchanged."""
    if encoder.config.vocab_size != len(builder.vocab):
        raise RunError("checkpoint vocabulary size does not match the vocabulary")
    scored = {}
    for qid in candidates.qids():
        docids = candidates.docids(qid)
        if not docids:
            scored[qid] = []
            continue
        for d in docids:
            if d not in builder.doc_store:
                raise RunError(f"candidate docid {d!r} for query {qid!r} is not in the document store")
        seqs = [builder.pair(queries[qid], d, qid=qid) for d in docids]
        probs = score_pairs(encoder, seqs, batch_size)
        scored[qid] = list(zip(docids, probs.tolist()))
    return RankedRun.from_scores(scored, tag)


# ---------------------------------------------------------------------------
# metrics


def reciprocal_rank(ranked, relevant):
    for i, d in enumerate(ranked, 1):
        if d in relevant:
            return 1.0 / i
    return 0.0


def average_precision(ranked, relevant):
    if not relevant:
        return 0.0
    hits, total = 0, 0.0
    for i, d in enumerate(ranked, 1):
        if d in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def ndcg_at(ranked, gains, k):
    """nDCG@k with ``gains`` mapping docid -> gain (unjudged docs gain 0)."""
    dcg = sum(gains.get(d, 0) / math.log2(i + 1) for i, d in enumerate(ranked[:k], 1))
    ideal = sorted((g for g in gains.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 1) for i, g in enumerate(ideal, 1))
    return dcg / idcg if idcg > 0 else 0.0


def metric_names(cutoffs=DEFAULT_CUTOFFS):
    return ["MRR"] + [f"nDCG@{k}" for k in cutoffs] + ["MAP"]


def per_query_metrics(run, qrels, cutoffs=DEFAULT_CUTOFFS, qids=None, graded=False):
    """Return ``(values, excluded)``: metric -> {qid: value}, and qids without relevant docs."""
    values = {m: {} for m in metric_names(cutoffs)}
    excluded = []
    for qid in (run.qids() if qids is None else qids):
        relevant = qrels.relevant(qid)
        if not relevant:
            excluded.append(qid)
            continue
        ranked = run.docids(qid)
        src = qrels.original if graded else qrels.grades
        gains = {d: g for d, g in src.get(qid, {}).items() if g > 0}
        values["MRR"][qid] = reciprocal_rank(ranked, relevant)
        for k in cutoffs:
            values[f"nDCG@{k}"][qid] = ndcg_at(ranked, gains, k)
        values["MAP"][qid] = average_precision(ranked, relevant)
    return values, excluded


def _marks(p):
    for level, mark in SIG_LEVELS:
        if p == p and p < level:
            return mark
    return ""


@dataclass
class MetricsReport:
    tag: str
    metrics: list
    per_query: dict
    mean: dict
    n_queries: int
    excluded: list = field(default_factory=list)
    baseline_tag: str = None
    baseline_mean: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    p: dict = field(default_factory=dict)
    marks: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self):
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["p"] = {k: (math.nan if v is None else v) for k, v in d["p"].items()}
        return cls(**d)


def evaluate(run, qrels, baseline=None, cutoffs=DEFAULT_CUTOFFS, graded=False):
    """Mean metrics for ``run`` and, with a baseline, paired t-tests per metric."""
    qids = run.qids()
    if baseline is not None and set(baseline.qids()) != set(qids):
        raise RunError("run and baseline cover different query sets")
    values, excluded = per_query_metrics(run, qrels, cutoffs, qids, graded)
    names = metric_names(cutoffs)
    evaluated = [q for q in qids if q not in set(excluded)]
    mean = {m: (math.fsum(values[m].values()) / len(evaluated) if evaluated else 0.0) for m in names}
    report = MetricsReport(run.tag, names, values, mean, len(evaluated), excluded)
    if baseline is not None:
        bvals, _ = per_query_metrics(baseline, qrels, cutoffs, qids, graded)
        report.baseline_tag = baseline.tag
        for m in names:
            a = [values[m][q] for q in evaluated]
            b = [bvals[m][q] for q in evaluated]
            report.baseline_mean[m] = math.fsum(b) / len(b) if b else 0.0
            report.delta[m] = mean[m] - report.baseline_mean[m]
            if len(a) >= 2:
                res = paired_ttest(a, b)
                report.t[m], report.p[m] = res.t, res.p
            else:
                report.t[m], report.p[m] = 0.0, math.nan
            report.marks[m] = _marks(report.p[m])
    return report


def format_table(rows, metrics=None, title=None):
    """Aligned text table; ``rows`` are ``(label, {metric: value}, {metric: mark})``."""
    metrics = metrics or metric_names()
    label_w = max([len(r[0]) for r in rows] + [4])
    lines = []
    if title:
        lines.append(title)
    lines.append(" " * label_w + "".join(f"  {m:>9}" for m in metrics))
    for label, vals, marks in rows:
        cells = "".join(f"  {vals[m]:>8.3f}{(marks or {}).get(m, '') or ' '}" for m in metrics)
        lines.append(f"{label:<{label_w}}{cells}")
    return "\n".join(lines) + "\n"


def report_table(report):
    rows = []
    if report.baseline_tag is not None:
        rows.append((report.baseline_tag + " (baseline)", report.baseline_mean, {}))
    rows.append((report.tag, report.mean, report.marks))
    legend = "marks vs baseline: * p<0.01, † p<0.05, ‡ p<0.10 (paired two-sided t-test)"
    return format_table(rows, report.metrics) + (legend + "\n" if report.baseline_tag else "")
