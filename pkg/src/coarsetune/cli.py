"""Command-line entry point: ``coarsetune <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

from . import experiment as X
from . import probe as P
from . import train as T
from .data import (DataError, DocStore, InstanceBuilder, Qrels, load_clicklog, load_queries,
                   make_finetune_instances)
from .model import (CheckpointError, CheckpointMeta, Encoder, PRESETS, SequenceTooLong, load_checkpoint,
                    preset, save_checkpoint)
from .numerics import NumericError
from .rankeval import RankedRun, RunError, evaluate, report_table, rerank
from .retrieval import DEFAULT_B, DEFAULT_DEPTH, DEFAULT_K1, IndexFormatError, InvertedIndex, build_index, search
from .synth import generate_synthetic_corpus
from .tokenizer import Vocabulary, VocabError, build_vocab

log = logging.getLogger("coarsetune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ERRORS = (DataError, CheckpointError, IndexFormatError, RunError, VocabError, P.ProbeError,
               X.ConfigError, T.TrainingError, SequenceTooLong, FileNotFoundError, IsADirectoryError, UnicodeDecodeError)


class UsageError(Exception):
    pass


def _need(path, what):
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_json(path, obj):
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_vocab(a):
    docs = DocStore.load(_need(a.docs, "document store"))
    vocab = build_vocab((t for _, t in docs.items()), a.size, a.min_freq)
    vocab.save(a.out)
    print(f"wrote {len(vocab)} tokens to {a.out}")


def cmd_index(a):
    index = build_index(DocStore.load(_need(a.docs, "document store")))
    index.save(a.out)
    print(f"indexed {len(index.docids)} documents into {a.out}")


def cmd_search(a):
    index = InvertedIndex.load(_need(a.index, "index"))
    queries = load_queries(_need(a.queries, "queries"))
    scored = {q: search(text, index, a.depth, a.k1, a.b) for q, text in queries.items()}
    RankedRun.from_scores(scored, a.tag).write_trec(a.out)
    print(f"wrote {len(scored)} rankings to {a.out}")


def cmd_synth(a):
    corpus = generate_synthetic_corpus(n_docs=a.n_docs, n_queries=a.n_queries, vocab_words=a.vocab_words,
                                       seed=a.seed, n_clicks=a.n_clicks, n_topics=a.n_topics)
    paths = corpus.write(a.out)
    for k, v in paths.items():
        print(f"{k}: {v}")


def _builder(a, docs=None):
    vocab = Vocabulary.load(_need(a.vocab, "vocabulary"))
    docs = docs or DocStore.load(_need(a.docs, "document store"))
    return vocab, docs, InstanceBuilder(vocab, docs, a.max_len)


def _plan_kw(a):
    kw = {k: getattr(a, k) for k in ("epochs", "batch_size", "lr", "seed", "weight_decay", "clip_norm")
          if getattr(a, k, None) is not None}
    return kw


def _save_final(result, out):
    save_checkpoint(result.encoder, result.meta, out)
    print(f"wrote {out}")


def cmd_pretrain(a):
    vocab, docs, builder = _builder(a)
    over = {"max_len": a.max_len}
    if a.dropout is not None:
        over["dropout"] = a.dropout
    cfg = preset(a.preset, len(vocab), **over)
    enc = Encoder.initialize(cfg, a.seed or 0)
    plan = T.default_plan("pretrain", mask_rate=a.mask_rate, **_plan_kw(a))
    res = T.pretrain_mlm(enc, docs.ids, builder, plan, CheckpointMeta(), a.checkpoint_dir, a.metrics_log)
    _save_final(res, a.out)


def _load_start(a, vocab):
    enc, meta = load_checkpoint(_need(a.checkpoint, "checkpoint"), vocab)
    return enc, meta


def cmd_cont_pretrain(a):
    vocab, docs, builder = _builder(a)
    enc, meta = _load_start(a, vocab)
    entries = load_clicklog(_need(a.clicklog, "click log"), docs, a.sampling_rate, a.sample_seed)
    docids = sorted({e.docid for e in entries})
    plan = T.default_plan("cont-pre", mask_rate=a.mask_rate, **_plan_kw(a))
    _save_final(T.pretrain_mlm(enc, docids, builder, plan, meta, a.checkpoint_dir, a.metrics_log), a.out)


def cmd_coarse_tune(a):
    vocab, docs, builder = _builder(a)
    enc, meta = _load_start(a, vocab)
    entries = load_clicklog(_need(a.clicklog, "click log"), docs, a.sampling_rate, a.sample_seed)
    plan = T.default_plan("coarse", mask_rate=a.mask_rate, w_mlm=a.w_mlm, w_qdpp=a.w_qdpp,
                          p_ispair=a.p_ispair, mlm_scope=a.mlm_scope, **_plan_kw(a))
    _save_final(T.coarse_tune(enc, entries, builder, plan, meta, a.checkpoint_dir, a.metrics_log), a.out)


def cmd_fine_tune(a):
    vocab, docs, builder = _builder(a)
    enc, meta = _load_start(a, vocab)
    queries = load_queries(_need(a.queries, "queries"))
    qrels = Qrels.load(_need(a.qrels, "qrels"))
    qids = None
    if a.qids:
        with open(_need(a.qids, "qid list"), encoding="utf-8") as fh:
            qids = [line.strip() for line in fh if line.strip()]
    instances, _ = make_finetune_instances(qrels, queries, builder, qids)
    plan = T.default_plan("finetune", relevance_from_qdpp=a.relevance_from_qdpp, **_plan_kw(a))
    _save_final(T.fine_tune(enc, instances, plan, meta, a.checkpoint_dir, a.metrics_log), a.out)


def cmd_rerank(a):
    vocab, docs, builder = _builder(a)
    enc, _ = _load_start(a, vocab)
    queries = load_queries(_need(a.queries, "queries"))
    cands = RankedRun.read_trec(_need(a.candidates, "candidate run"))
    missing = [q for q in cands.qids() if q not in queries]
    if missing:
        raise DataError(f"candidate run has queries without text, e.g. {missing[0]!r}")
    run = rerank(enc, queries, cands, builder, a.batch, a.tag)
    run.write_trec(a.out)
    print(f"wrote {a.out}")


def cmd_evaluate(a):
    run = RankedRun.read_trec(_need(a.run, "run"))
    base = RankedRun.read_trec(_need(a.baseline, "baseline run")) if a.baseline else None
    qrels = Qrels.load(_need(a.qrels, "qrels"))
    report = evaluate(run, qrels, base, graded=a.graded)
    sys.stdout.write(report_table(report))
    if a.json:
        with open(a.json, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json())


def cmd_probe(a):
    vocab = Vocabulary.load(_need(a.vocab, "vocabulary"))
    if a.text is not None:
        text = a.text
    elif a.docid:
        text = DocStore.load(_need(a.docs, "document store"))[a.docid]
    else:
        raise UsageError("probe needs --text or --docid with --docs")
    results, labels = [], []
    for path in a.checkpoint:
        enc, meta = load_checkpoint(_need(path, "checkpoint"), vocab)
        results.append(P.predict_query(enc, text, vocab, a.n_masks, a.top_k))
        labels.append(a.labels[len(labels)] if a.labels and len(a.labels) > len(labels) else meta.stage)
    sys.stdout.write(P.probe_report(results, labels))
    if a.json:
        with open(a.json, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(P.report_json(results, labels))


def _experiment_config(a):
    overrides = {f.name: getattr(a, f.name, None) for f in fields(X.ExperimentConfig)}
    return X.resolve_config(a.config, overrides)


def cmd_run_condition(a):
    base = _experiment_config(a)
    names = [c.strip() for c in base.condition.split(",") if c.strip()]
    results = []
    for name in names:
        cfg = X.ExperimentConfig(**{**asdict(base), "condition": name}).validate()
        results.append(X.run_condition(cfg))
    table, tests = X.table_for(results, a.baseline_condition)
    sys.stdout.write(table)
    if len(results) > 1:
        reports = os.path.join(base.work_dir, "reports")
        with open(os.path.join(reports, "table.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table)
        _write_json(os.path.join(reports, "table.json"), _clean(tests))


def _clean(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, float) and obj in (float("inf"), float("-inf")):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    return obj


def cmd_sweep(a):
    cfg = _experiment_config(a)
    rates = X.parse_grid(a.sampling)
    ce = X.parse_grid(a.coarse_epochs_grid, int)
    fe = X.parse_grid(a.fine_epochs_grid, int)
    _, tables = X.sweep(cfg, rates, ce, fe)
    sys.stdout.write(tables)


# ---------------------------------------------------------------------------
# parser


def _add_train(p, stage):
    p.add_argument("--vocab", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-dir", help="per-epoch checkpoints go here")
    p.add_argument("--metrics-log", help="JSON-lines metrics, one object per epoch")
    if stage != "finetune":
        p.add_argument("--mask-rate", type=float, default=0.15)
    if stage != "pretrain":
        p.add_argument("--checkpoint", required=True, help="starting checkpoint")
    if stage in ("coarse", "cont-pre"):
        p.add_argument("--clicklog", required=True)
        p.add_argument("--sampling-rate", type=float, default=0.08)
        p.add_argument("--sample-seed", type=int, default=0)


def _add_experiment_flags(p):
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    for f in fields(X.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(X.ExperimentConfig, f.name)
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, default=None, type=_bool)
        elif isinstance(default, int):
            p.add_argument(flag, dest=f.name, default=None, type=int)
        elif isinstance(default, float):
            p.add_argument(flag, dest=f.name, default=None, type=float)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser():
    ap = argparse.ArgumentParser(prog="coarsetune", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("build-vocab", help="train a WordPiece vocabulary")
    p.add_argument("--docs", required=True)
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--min-freq", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("index", help="build a BM25 inverted index")
    p.add_argument("--docs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("search", help="BM25 retrieval to a TREC run file")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    p.add_argument("--k1", type=float, default=DEFAULT_K1)
    p.add_argument("--b", type=float, default=DEFAULT_B)
    p.add_argument("--tag", default="bm25")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("pretrain", help="MLM pre-training from random initialisation")
    _add_train(p, "pretrain")
    p.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    p.add_argument("--dropout", type=float)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("cont-pretrain", help="continual MLM pre-training on clicked documents")
    _add_train(p, "cont-pre")
    p.set_defaults(fn=cmd_cont_pretrain)

    p = sub.add_parser("coarse-tune", help="MLM + query-document pair prediction on a click log")
    _add_train(p, "coarse")
    p.add_argument("--w-mlm", type=float, default=1.0)
    p.add_argument("--w-qdpp", type=float, default=1.0)
    p.add_argument("--p-ispair", type=float, default=0.5)
    p.add_argument("--mlm-scope", default="all-tokens", choices=["all-tokens", "query-only"])
    p.set_defaults(fn=cmd_coarse_tune)

    p = sub.add_parser("fine-tune", help="relevance classification on qrels")
    _add_train(p, "finetune")
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--qids", help="file with one training qid per line (default: all)")
    p.add_argument("--relevance-from-qdpp", action="store_true")
    p.set_defaults(fn=cmd_fine_tune)

    p = sub.add_parser("rerank", help="re-score a candidate run with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--tag", default="rerank")
    p.set_defaults(fn=cmd_rerank)

    p = sub.add_parser("evaluate", help="metrics table, optionally with t-tests against a baseline")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--baseline")
    p.add_argument("--graded", action="store_true", help="use original grades as nDCG gains")
    p.add_argument("--json", help="write the JSON report here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("probe", help="predict query tokens for a document")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat for side-by-side columns")
    p.add_argument("--label", dest="labels", action="append")
    p.add_argument("--vocab", required=True)
    p.add_argument("--text")
    p.add_argument("--docid")
    p.add_argument("--docs")
    p.add_argument("--n-masks", type=int, default=P.DEFAULT_N_MASKS)
    p.add_argument("--top-k", type=int, default=P.DEFAULT_TOP_K)
    p.add_argument("--json", help="write the JSON twin here")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("synth", help="write a synthetic corpus with planted queries")
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=2000)
    p.add_argument("--n-queries", type=int, default=250)
    p.add_argument("--n-clicks", type=int, default=25000)
    p.add_argument("--n-topics", type=int, default=20)
    p.add_argument("--vocab-words", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("run-condition", help="one or more compared methods with CV folds and seeds")
    _add_experiment_flags(p)
    p.add_argument("--seeds", dest="n_seeds", type=int, help="number of trials (seeds s..s+n-1)")
    p.add_argument("--baseline-condition", default="fine-tuned")
    p.set_defaults(fn=cmd_run_condition)

    p = sub.add_parser("sweep", help="coarse+fine over sampling rate x coarse epochs x fine epochs")
    _add_experiment_flags(p)
    p.add_argument("--seeds", dest="n_seeds", type=int)
    p.add_argument("--sampling", default="0.08")
    p.add_argument("--coarse-epochs-grid", default="4")
    p.add_argument("--fine-epochs-grid", default="3")
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyError as exc:
        print(f"data error: unknown id {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
