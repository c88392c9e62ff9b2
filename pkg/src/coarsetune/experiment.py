"""Experiment orchestration: the six compared methods, CV folds, multi-seed runs, sweeps.

A work directory holds ``checkpoints/``, ``runs/``, ``reports/`` and ``logs/``.
Stage checkpoints that do not depend on the CV fold (coarse-tuning and
continual pre-training) are trained once per seed and reused across folds,
conditions and sweep cells.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import DocStore, InstanceBuilder, Qrels, fold_split, load_clicklog, load_queries
from .data import make_finetune_instances
from .model import load_checkpoint
from .rankeval import RankedRun, _marks, evaluate, format_table, metric_names, rerank
from .retrieval import InvertedIndex, build_index, search
from .stats import paired_ttest
from .tokenizer import Vocabulary
from . import train as T

log = logging.getLogger(__name__)

CONDITIONS = ("bm25", "pre-trained", "coarse-tuned", "fine-tuned", "cont-pre+fine", "coarse+fine")
WORK_SUBDIRS = ("checkpoints", "runs", "reports", "logs")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    docs: str = None
    vocab: str = None
    clicklog: str = None
    queries: str = None
    qrels: str = None
    pretrained: str = None
    work_dir: str = "work"
    condition: str = "coarse+fine"
    sampling_rate: float = 0.08
    sample_seed: int = 0
    folds: int = 4
    run_folds: int = 0
    seed: int = 0
    n_seeds: int = 5
    depth: int = 1000
    k1: float = 1.2
    b: float = 0.75
    max_len: int = 256
    max_query_tokens: int = 64
    rerank_batch: int = 128
    coarse_epochs: int = 4
    coarse_batch: int = 80
    coarse_lr: float = 1e-3
    w_mlm: float = 1.0
    w_qdpp: float = 1.0
    mask_rate: float = 0.15
    p_ispair: float = 0.5
    mlm_scope: str = "all-tokens"
    contpre_epochs: int = 4
    contpre_batch: int = 80
    contpre_lr: float = 1e-3
    fine_epochs: int = 3
    fine_batch: int = 128
    fine_lr: float = 1e-3
    relevance_from_qdpp: bool = False
    clip_norm: float = 1.0

    @property
    def seeds(self):
        return list(range(self.seed, self.seed + self.n_seeds))

    def validate(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}; choose from {', '.join(CONDITIONS)}")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ConfigError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if self.n_seeds < 1:
            raise ConfigError("the seed list must not be empty")
        if self.folds < 2 or self.run_folds < 0 or self.run_folds > self.folds:
            raise ConfigError("folds must be >= 2 and run_folds in 0..folds")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        needed = ["docs", "queries", "qrels"]
        if self.condition != "bm25":
            needed += ["vocab", "pretrained"]
        if self.condition in ("coarse-tuned", "coarse+fine", "cont-pre+fine"):
            needed.append("clicklog")
        for key in needed:
            path = getattr(self, key)
            if not path:
                raise ConfigError(f"condition {self.condition} needs '{key}'")
            if not os.path.exists(path):
                raise ConfigError(f"{key} file not found: {path}")
        return self

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(name, raw):
    f = {f.name: f for f in fields(ExperimentConfig)}.get(name)
    if f is None:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(ExperimentConfig, name)
    raw = raw.strip()
    if raw == "":
        return None
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text, source="<config>"):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        try:
            out[key] = _coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def resolve_config(file_path=None, overrides=None):
    """Defaults, then the config file, then explicit overrides (``None`` values skipped)."""
    values = {}
    if file_path:
        if not os.path.exists(file_path):
            raise ConfigError(f"config file not found: {file_path}")
        with open(file_path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read(), file_path))
    for k, v in (overrides or {}).items():
        if v is not None:
            if k not in {f.name for f in fields(ExperimentConfig)}:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = v
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# shared inputs


class Workspace:
    """Loaded inputs plus the work-dir layout for one experiment."""

    def __init__(self, cfg):
        self.cfg = cfg
        for sub in WORK_SUBDIRS:
            os.makedirs(os.path.join(cfg.work_dir, sub), exist_ok=True)
        self.docs = DocStore.load(cfg.docs)
        self.queries = load_queries(cfg.queries)
        self.qrels = Qrels.load(cfg.qrels)
        self.vocab = Vocabulary.load(cfg.vocab) if cfg.vocab else None
        self.builder = (InstanceBuilder(self.vocab, self.docs, cfg.max_len, cfg.max_query_tokens)
                        if self.vocab else None)
        self._clicks = None
        self._index = None

    def path(self, sub, name):
        return os.path.join(self.cfg.work_dir, sub, name)

    @property
    def index(self):
        if self._index is None:
            p = self.path("checkpoints", "bm25.idx")
            if os.path.exists(p):
                self._index = InvertedIndex.load(p)
            else:
                self._index = build_index(self.docs)
                self._index.save(p)
        return self._index

    def clicks(self, rate=None):
        rate = self.cfg.sampling_rate if rate is None else rate
        if self._clicks is None or self._clicks[0] != rate:
            self._clicks = (rate, load_clicklog(self.cfg.clicklog, self.docs, rate, self.cfg.sample_seed))
        return self._clicks[1]

    def eval_qids(self):
        """Judged queries that also have query text, in sorted order."""
        return sorted(q for q in self.qrels.qids() if q in self.queries)

    def folds(self):
        folds = fold_split(self.eval_qids(), self.cfg.folds)
        return folds[: self.cfg.run_folds] if self.cfg.run_folds else folds

    def candidates(self, qids):
        c = self.cfg
        scored = {q: search(self.queries[q], self.index, c.depth, c.k1, c.b) for q in qids}
        return RankedRun.from_scores(scored, "bm25")

    def load_pretrained(self):
        enc, meta = load_checkpoint(self.cfg.pretrained, self.vocab)
        if meta.stage != "pretrained":
            raise ConfigError(f"{self.cfg.pretrained} is a {meta.stage!r} checkpoint, expected 'pretrained'")
        return enc, meta


# ---------------------------------------------------------------------------
# stage checkpoints, cached in the work dir


def _plan(cfg, stage, seed, **over):
    if stage == "coarse":
        kw = dict(epochs=cfg.coarse_epochs, batch_size=cfg.coarse_batch, lr=cfg.coarse_lr,
                  w_mlm=cfg.w_mlm, w_qdpp=cfg.w_qdpp, mask_rate=cfg.mask_rate,
                  p_ispair=cfg.p_ispair, mlm_scope=cfg.mlm_scope)
    elif stage == "cont-pre":
        kw = dict(epochs=cfg.contpre_epochs, batch_size=cfg.contpre_batch, lr=cfg.contpre_lr,
                  mask_rate=cfg.mask_rate)
    else:
        kw = dict(epochs=cfg.fine_epochs, batch_size=cfg.fine_batch, lr=cfg.fine_lr,
                  relevance_from_qdpp=cfg.relevance_from_qdpp)
    kw.update(seed=seed, clip_norm=cfg.clip_norm)
    kw.update(over)
    return T.default_plan(stage, **kw)


def _rate_tag(rate):
    return f"r{rate:.4f}".rstrip("0").rstrip(".")


def stage_checkpoint(ws, stage, seed, epochs=None, rate=None):
    """Path of the ``stage`` checkpoint after ``epochs`` epochs, training it if missing."""
    cfg = ws.cfg
    rate = cfg.sampling_rate if rate is None else rate
    if stage == "coarse":
        epochs = epochs or cfg.coarse_epochs
        tag = f"coarse-{_rate_tag(rate)}-s{seed}"
    else:
        epochs = epochs or cfg.contpre_epochs
        tag = f"contpre-{_rate_tag(rate)}-s{seed}"
    ckdir = ws.path("checkpoints", tag)
    name = "coarse" if stage == "coarse" else "cont-pre"
    path = os.path.join(ckdir, f"{name}-epoch{epochs}.ckpt")
    if os.path.exists(path):
        return path
    # train up to the largest epoch count any caller needs; earlier epochs are kept too
    enc, meta = ws.load_pretrained()
    entries = ws.clicks(rate)
    if not entries:
        raise T.TrainingError(f"click log is empty after sampling at rate {rate}")
    plan = _plan(cfg, stage, seed, epochs=epochs)
    metrics = ws.path("logs", f"{tag}.jsonl")
    if os.path.exists(metrics):
        os.remove(metrics)
    if stage == "coarse":
        T.coarse_tune(enc, entries, ws.builder, plan, meta, ckdir, metrics)
    else:
        docids = sorted({e.docid for e in entries})
        T.pretrain_mlm(enc, docids, ws.builder, plan, meta, ckdir, metrics)
    return path


def _fine_tuned(ws, start_path, train_qids, seed, fine_epochs=None, tag=""):
    enc, meta = (ws.load_pretrained() if start_path is None else load_checkpoint(start_path, ws.vocab))
    instances, _ = make_finetune_instances(ws.qrels, ws.queries, ws.builder, train_qids)
    plan = _plan(ws.cfg, "finetune", seed, **({"epochs": fine_epochs} if fine_epochs else {}))
    metrics = ws.path("logs", f"finetune-{tag}.jsonl")
    if os.path.exists(metrics):
        os.remove(metrics)
    T.fine_tune(enc, instances, plan, meta, metrics_log=metrics)
    return enc


def _encoder_for(ws, condition, seed, train_qids, fold_tag, coarse_epochs=None, fine_epochs=None,
                 rate=None):
    if condition == "pre-trained":
        enc, _ = ws.load_pretrained()
        enc.reset_relevance_head(seed=[seed, 0x5EED])
        return enc
    if condition == "coarse-tuned":
        enc, _ = load_checkpoint(stage_checkpoint(ws, "coarse", seed, coarse_epochs, rate), ws.vocab)
        enc.reset_relevance_head(from_qdpp=True)
        return enc
    if condition == "fine-tuned":
        return _fine_tuned(ws, None, train_qids, seed, fine_epochs, f"fine-{fold_tag}-s{seed}")
    if condition == "cont-pre+fine":
        start = stage_checkpoint(ws, "cont-pre", seed, None, rate)
        return _fine_tuned(ws, start, train_qids, seed, fine_epochs, f"contpre-{fold_tag}-s{seed}")
    if condition == "coarse+fine":
        start = stage_checkpoint(ws, "coarse", seed, coarse_epochs, rate)
        return _fine_tuned(ws, start, train_qids, seed, fine_epochs, f"cf-{fold_tag}-s{seed}")
    raise ConfigError(f"unknown condition {condition!r}")


# ---------------------------------------------------------------------------
# conditions


@dataclass
class ConditionResult:
    condition: str
    seeds: list
    run_paths: list
    seed_means: list
    mean: dict
    per_query: dict
    qids: list

    def to_dict(self):
        return asdict(self)


def _merge(runs, tag):
    out = RankedRun(tag)
    for r in runs:
        for q in r.qids():
            out.rankings[q] = r.rankings[q]
    return out


def run_seed(ws, condition, seed, coarse_epochs=None, fine_epochs=None, rate=None):
    """One trial: every CV fold re-ranked with a model trained on the other folds."""
    folds = fold_split(ws.eval_qids(), ws.cfg.folds)
    run_idx = range(ws.cfg.run_folds or len(folds))
    pieces = []
    for f in run_idx:
        test = folds[f]
        train_qids = [q for g, fold in enumerate(folds) if g != f for q in fold]
        cands = ws.candidates(test)
        if condition == "bm25":
            pieces.append(cands)
            continue
        enc = _encoder_for(ws, condition, seed, train_qids, f"f{f}", coarse_epochs, fine_epochs, rate)
        pieces.append(rerank(enc, ws.queries, cands, ws.builder, ws.cfg.rerank_batch, condition))
    return _merge(pieces, condition)


def _average(values_by_seed, qids):
    names = list(values_by_seed[0])
    return {m: {q: math.fsum(v[m][q] for v in values_by_seed) / len(values_by_seed) for q in qids}
            for m in names}


def run_condition(cfg, ws=None, condition=None, coarse_epochs=None, fine_epochs=None, rate=None,
                  write=True):
    """Run a condition over all seeds; write per-seed runs, a report and a manifest."""
    if ws is None:
        ws = Workspace(cfg.validate())
    condition = condition or cfg.condition
    seeds = [cfg.seed] if condition == "bm25" else cfg.seeds
    run_paths, seed_means, per_seed = [], [], []
    for s in seeds:
        run = run_seed(ws, condition, s, coarse_epochs, fine_epochs, rate)
        rep = evaluate(run, ws.qrels)
        if write:
            name = f"{_safe(condition)}-s{s}.trec"
            run.write_trec(ws.path("runs", name))
            run_paths.append(os.path.join("runs", name))
        seed_means.append(rep.mean)
        per_seed.append(rep.per_query)
        log.info("%s seed %d: %s", condition, s, {k: round(v, 4) for k, v in rep.mean.items()})
    qids = sorted(per_seed[0]["MRR"])
    per_query = _average(per_seed, qids)
    mean = {m: math.fsum(per_query[m].values()) / len(qids) if qids else 0.0 for m in per_query}
    res = ConditionResult(condition, seeds, run_paths, seed_means, mean, per_query, qids)
    if write:
        with open(ws.path("reports", f"{_safe(condition)}.json"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(ws.path("reports", f"{_safe(condition)}.manifest"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(cfg.to_text().replace(f"condition = {cfg.condition}", f"condition = {condition}"))
    return res


def _safe(condition):
    return condition.replace("+", "_")


def load_condition_result(path):
    with open(path, encoding="utf-8") as fh:
        return ConditionResult(**json.load(fh))


def compare(results, baseline, metrics=None):
    """Table rows with paired t-tests of seed-averaged per-query values against ``baseline``."""
    metrics = metrics or metric_names()
    rows, tests = [], {}
    for res in results:
        marks, tests[res.condition] = {}, {}
        if res is not baseline and res.qids == baseline.qids and len(res.qids) >= 2:
            for m in metrics:
                t = paired_ttest([res.per_query[m][q] for q in res.qids],
                                 [baseline.per_query[m][q] for q in res.qids])
                tests[res.condition][m] = {"delta": res.mean[m] - baseline.mean[m], "t": t.t, "p": t.p}
                marks[m] = _marks(t.p)
        rows.append((res.condition, res.mean, marks))
    return rows, tests


# ---------------------------------------------------------------------------
# sweep


def parse_grid(spec, cast=float):
    """``a:b:step`` (inclusive), ``a,b,c`` or a single value."""
    spec = str(spec).strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range must be start:stop:step, got {spec!r}")
        a, b, step = (float(x) for x in parts)
        if step <= 0 or b < a:
            raise ConfigError(f"bad range {spec!r}")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        vals = [round(a + i * step, 10) for i in range(n)]
    else:
        vals = [float(x) for x in spec.split(",") if x.strip()]
    if not vals:
        raise ConfigError(f"empty grid {spec!r}")
    return [cast(v) for v in vals]


def sweep(cfg, rates, coarse_epochs, fine_epochs, metric="MRR"):
    """coarse+fine over the grid; returns ``(cells, tables)``.

    Coarse checkpoints are trained once per (rate, seed) up to the largest
    epoch count and the per-epoch checkpoints are reused for smaller counts.
    """
    cfg = ExperimentConfig(**{**asdict(cfg), "condition": "coarse+fine"}).validate()
    ws = Workspace(cfg)
    top = max(coarse_epochs)
    cells = []
    for rate in rates:
        for s in cfg.seeds:
            stage_checkpoint(ws, "coarse", s, top, rate)
        for ce in coarse_epochs:
            for fe in fine_epochs:
                res = run_condition(cfg, ws, "coarse+fine", ce, fe, rate, write=False)
                cells.append({"sampling_rate": rate, "coarse_epochs": ce, "fine_epochs": fe,
                              "mean": res.mean})
                log.info("sweep rate=%s coarse=%d fine=%d %s=%.4f", rate, ce, fe, metric, res.mean[metric])
    tables = sweep_tables(cells)
    with open(ws.path("reports", "sweep.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(cells, indent=2, sort_keys=True) + "\n")
    with open(ws.path("reports", "sweep.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(tables)
    return cells, tables


def sweep_tables(cells, metrics=("MRR", "nDCG@5")):
    """One table per swept parameter, the other two held at their best values."""
    best = max(cells, key=lambda c: (c["mean"]["MRR"], -c["sampling_rate"], -c["coarse_epochs"], -c["fine_epochs"]))
    out = []
    for key, label in (("sampling_rate", "sampling rate (%)"), ("coarse_epochs", "coarse-tuning epochs"),
                       ("fine_epochs", "fine-tuning epochs")):
        rows = []
        for c in cells:
            if all(c[k] == best[k] for k in ("sampling_rate", "coarse_epochs", "fine_epochs") if k != key):
                v = c[key] * 100 if key == "sampling_rate" else c[key]
                rows.append((f"{v:g}", c["mean"], {}))
        out.append(format_table(rows, list(metrics), title=f"varying {label}"))
    return "\n".join(out)


def table_for(results, baseline_name="fine-tuned"):
    base = next((r for r in results if r.condition == baseline_name), None)
    if base is None:
        return format_table([(r.condition, r.mean, {}) for r in results]), {}
    rows, tests = compare(results, base)
    legend = f"marks vs {baseline_name}: * p<0.01, † p<0.05, ‡ p<0.10 (paired two-sided t-test)\n"
    return format_table(rows) + legend, tests


def metric_std(result, metric):
    vals = [m[metric] for m in result.seed_means]
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
