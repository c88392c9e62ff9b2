"""AdamW and the training stages: MLM pre-training, coarse-tuning, fine-tuning.

Coarse-tuning optimises ``w_mlm * L_mlm + w_qdpp * L_qdpp`` over click-log
pairs; each epoch re-draws IsPair/NotPair substitutions and MLM masks from
per-instance streams seeded by ``(seed, epoch, index)``.
"""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import apply_mlm_mask, clicked_map, collate, make_qdpp_instance, MLM_SCOPES
from .model import IS_PAIR, CheckpointMeta, save_checkpoint

log = logging.getLogger(__name__)

STAGE_TAGS = {"pretrain": "pretrained", "coarse": "coarse", "cont-pre": "cont-pre", "finetune": "finetuned"}
_DROPOUT_STREAM = 2**31 - 1


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(name):
    """Weight decay applies to weight matrices and embeddings, not biases or gains."""
    return not (name.endswith("bias") or name.endswith(".gain"))


def adamw_step(params, state, decay_filter=decays):
    """One AdamW update in place over ``params`` (name -> Tensor with ``.grad``).

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
    Parameters without a gradient are left untouched.
    """
    live = {k: p for k, p in params.items() if p.grad is not None}
    for k, p in live.items():
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {k}")
        if not np.isfinite(p.grad).all():
            raise nx.NumericError(f"non-finite gradient for {k}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in live.items():
        g = p.grad
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        update = state.lr * ((m / c1) / (np.sqrt(v / c2) + state.eps))
        if state.weight_decay and decay_filter(k):
            update = update + state.lr * state.weight_decay * p.data
        p.data = p.data - update


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(math.fsum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        f = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * f
    return total


@dataclass
class TrainPlan:
    stage: str
    epochs: int
    batch_size: int
    seed: int = 0
    w_mlm: float = 1.0
    w_qdpp: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    mask_rate: float = 0.15
    mlm_scope: str = "all-tokens"
    p_ispair: float = 0.5
    mlm_on_notpair: bool = True
    relevance_from_qdpp: bool = False

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.w_mlm < 0 or self.w_qdpp < 0:
            raise ValueError("loss weights must be non-negative")
        if self.stage == "coarse" and self.w_mlm == 0 and self.w_qdpp == 0:
            raise ValueError("coarse-tuning needs a non-zero MLM or QDPP weight")
        if self.mlm_scope not in MLM_SCOPES:
            raise ValueError(f"unknown MLM scope {self.mlm_scope!r}")


DEFAULT_PLANS = {
    "pretrain": dict(epochs=4, batch_size=32),
    "coarse": dict(epochs=4, batch_size=80),
    "cont-pre": dict(epochs=4, batch_size=80),
    "finetune": dict(epochs=3, batch_size=128),
}


def default_plan(stage, **overrides):
    if stage not in DEFAULT_PLANS:
        raise ValueError(f"unknown stage {stage!r}")
    kw = dict(DEFAULT_PLANS[stage])
    kw.update(overrides)
    return TrainPlan(stage=stage, **kw)


@dataclass
class TrainResult:
    encoder: object
    history: list
    checkpoints: list
    meta: CheckpointMeta


# ---------------------------------------------------------------------------
# losses


def mlm_loss(encoder, hidden, targets):
    """Mean MLM cross-entropy over targeted positions, or ``None`` if there are none."""
    b_idx, t_idx = np.nonzero(targets != nx.IGNORE_INDEX)
    if b_idx.size == 0:
        return None, 0, 0
    logits = encoder.mlm_logits(hidden, (b_idx, t_idx))
    gold = targets[b_idx, t_idx]
    loss = nx.softmax_cross_entropy(logits, gold)
    correct = int((logits.data.argmax(axis=1) == gold).sum())
    return loss, correct, int(b_idx.size)


def batch_loss(encoder, seqs, plan, rng=None):
    """Forward one batch and return ``(loss tensor, stats dict)`` for the plan's stage."""
    ids, segs, mask, targets = collate(seqs)
    hidden = encoder.hidden_states(ids, segs, mask, rng=rng)
    stats = {}
    terms = []
    if plan.stage in ("pretrain", "cont-pre", "coarse") and plan.w_mlm > 0:
        if plan.stage == "coarse" and not plan.mlm_on_notpair:
            keep = np.array([s.pair_label == IS_PAIR for s in seqs])
            targets = np.where(keep[:, None], targets, nx.IGNORE_INDEX)
        loss, correct, n = mlm_loss(encoder, hidden, targets)
        if loss is not None:
            terms.append(nx.scale(loss, plan.w_mlm))
            stats.update(mlm_loss=loss.item(), mlm_correct=correct, mlm_n=n)
    if plan.stage == "coarse" and plan.w_qdpp > 0:
        labels = np.array([s.pair_label for s in seqs])
        logits = encoder.qdpp_logits(hidden)
        loss = nx.softmax_cross_entropy(logits, labels)
        terms.append(nx.scale(loss, plan.w_qdpp))
        stats.update(qdpp_loss=loss.item(), qdpp_correct=int((logits.data.argmax(1) == labels).sum()))
    if plan.stage == "finetune":
        labels = np.array([s.relevance_label for s in seqs])
        logits = encoder.relevance_logits(hidden)
        loss = nx.softmax_cross_entropy(logits, labels)
        terms.append(loss)
        stats.update(cls_loss=loss.item())
    if not terms:
        return None, stats
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return total, stats


def train_step(encoder, seqs, plan, opt, rng=None):
    encoder.zero_grad()
    with nx.Tape() as tape:
        loss, stats = batch_loss(encoder, seqs, plan, rng)
        if loss is None:
            return stats
        tape.backward(loss)
    clip_grad_norm(encoder.parameters(), plan.clip_norm)
    adamw_step(encoder.params, opt)
    stats["loss"] = loss.item()
    return stats


# ---------------------------------------------------------------------------
# loops


def _instance_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, index])


def _stage_meta(base, plan, epoch):
    return CheckpointMeta(stage=STAGE_TAGS[plan.stage], seeds=list(base.seeds) + [plan.seed],
                          epoch=epoch, extra=dict(base.extra, **{plan.stage: asdict(plan)}))


def _run_epochs(encoder, plan, make_epoch, meta, checkpoint_dir=None, metrics_log=None):
    opt = OptimizerState(lr=plan.lr, weight_decay=plan.weight_decay)
    history, checkpoints = [], []
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        seqs = make_epoch(epoch)
        if not seqs:
            raise TrainingError(f"no training instances for stage {plan.stage}")
        drop_rng = _instance_rng(plan.seed, epoch, _DROPOUT_STREAM)
        sums = {"mlm_loss": [], "qdpp_loss": [], "cls_loss": []}
        qdpp_correct = qdpp_n = 0
        for start in range(0, len(seqs), plan.batch_size):
            batch = seqs[start:start + plan.batch_size]
            stats = train_step(encoder, batch, plan, opt, drop_rng)
            for k in sums:
                if k in stats:
                    sums[k].append(stats[k])
            if "qdpp_correct" in stats:
                qdpp_correct += stats["qdpp_correct"]
                qdpp_n += len(batch)
        record = {
            "stage": plan.stage,
            "epoch": epoch,
            "mlm_loss": float(np.mean(sums["mlm_loss"])) if sums["mlm_loss"] else None,
            "qdpp_loss": float(np.mean(sums["qdpp_loss"])) if sums["qdpp_loss"] else None,
            "qdpp_acc": qdpp_correct / qdpp_n if qdpp_n else None,
            "cls_loss": float(np.mean(sums["cls_loss"])) if sums["cls_loss"] else None,
            "wall_s": round(time.perf_counter() - t0, 3),
        }
        history.append(record)
        log.info("%s epoch %d: %s", plan.stage, epoch,
                 {k: v for k, v in record.items() if v is not None and k not in ("stage", "epoch")})
        if metrics_log:
            with open(metrics_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        epoch_meta = _stage_meta(meta, plan, epoch)
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, f"{plan.stage}-epoch{epoch}.ckpt")
            save_checkpoint(encoder, epoch_meta, path)
            checkpoints.append(path)
    final = _stage_meta(meta, plan, plan.epochs)
    return TrainResult(encoder, history, checkpoints, final)


def _check_plan(plan, stage):
    if plan.stage != stage:
        raise ValueError(f"plan is for stage {plan.stage!r}, expected {stage!r}")


def pretrain_mlm(encoder, docids, builder, plan, meta=None, checkpoint_dir=None, metrics_log=None):
    """MLM-only training on ``[CLS] doc [SEP]`` sequences.

    ``plan.stage`` is ``pretrain`` (initial pre-training) or ``cont-pre``
    (continual pre-training of an already pre-trained model).
    """
    if plan.stage not in ("pretrain", "cont-pre"):
        raise ValueError("pretrain_mlm needs a 'pretrain' or 'cont-pre' plan")
    docids = list(docids)
    if not docids:
        raise TrainingError("cannot pre-train on an empty corpus")
    base = [builder.single(d) for d in docids]

    def make_epoch(epoch):
        order = np.random.default_rng([plan.seed, epoch]).permutation(len(base))
        return [apply_mlm_mask(base[i], plan.mask_rate, "all-tokens", _instance_rng(plan.seed, epoch, int(i)))
                for i in order]

    return _run_epochs(encoder, plan, make_epoch, meta or CheckpointMeta(), checkpoint_dir, metrics_log)


def coarse_instances(entries, builder, plan, epoch, clicked=None):
    """Epoch instances: shuffled click pairs, pair-substituted and masked."""
    clicked = clicked if clicked is not None else clicked_map(entries)
    order = np.random.default_rng([plan.seed, epoch]).permutation(len(entries))
    out = []
    for i in order:
        rng = _instance_rng(plan.seed, epoch, int(i))
        seq = make_qdpp_instance(entries[i], builder, clicked, plan.p_ispair, rng)
        out.append(apply_mlm_mask(seq, plan.mask_rate, plan.mlm_scope, rng))
    return out


def coarse_tune(encoder, entries, builder, plan, meta=None, checkpoint_dir=None, metrics_log=None):
    """Joint MLM + query-document pair prediction over click-log pairs."""
    _check_plan(plan, "coarse")
    if meta is not None and meta.stage != "pretrained":
        raise TrainingError(f"coarse-tuning starts from a pre-trained model, got stage {meta.stage!r}")
    if not entries:
        raise TrainingError("click log is empty after sampling")
    clicked = clicked_map(entries)
    return _run_epochs(encoder, plan, lambda e: coarse_instances(entries, builder, plan, e, clicked),
                       meta or CheckpointMeta(), checkpoint_dir, metrics_log)


def fine_tune(encoder, instances, plan, meta=None, checkpoint_dir=None, metrics_log=None,
              head_seed=None):
    """Relevance classification over labelled pairs; the relevance head starts fresh.

    With ``plan.relevance_from_qdpp`` the head is copied from the pair-prediction head.
    """
    _check_plan(plan, "finetune")
    if not instances:
        raise TrainingError("no fine-tuning instances")
    labels = {s.relevance_label for s in instances}
    if len(labels) < 2:
        log.warning("fine-tuning data contains a single relevance class %s", sorted(labels))
    encoder.reset_relevance_head(seed=[plan.seed, 0x5EED] if head_seed is None else head_seed,
                                 from_qdpp=plan.relevance_from_qdpp)

    def make_epoch(epoch):
        order = np.random.default_rng([plan.seed, epoch]).permutation(len(instances))
        return [instances[i] for i in order]

    return _run_epochs(encoder, plan, make_epoch, meta or CheckpointMeta(), checkpoint_dir, metrics_log)


# ---------------------------------------------------------------------------
# evaluation helpers


def qdpp_accuracy(encoder, entries, builder, clicked=None, seed=0, p_ispair=0.5, batch_size=128):
    """Accuracy of the pair-prediction head on freshly drawn, unmasked instances."""
    clicked = clicked if clicked is not None else clicked_map(entries)
    seqs = [make_qdpp_instance(e, builder, clicked, p_ispair, _instance_rng(seed, 0, i))
            for i, e in enumerate(entries)]
    correct = 0
    for start in range(0, len(seqs), batch_size):
        batch = seqs[start:start + batch_size]
        ids, segs, mask, _ = collate(batch)
        pred = encoder.qdpp_logits(encoder.hidden_states(ids, segs, mask)).data.argmax(axis=1)
        correct += int((pred == np.array([s.pair_label for s in batch])).sum())
    return correct / len(seqs)


def mlm_eval(encoder, seqs, batch_size=128):
    """Mean MLM loss and top-1 accuracy over masked sequences (no dropout)."""
    total, n, correct = 0.0, 0, 0
    for start in range(0, len(seqs), batch_size):
        ids, segs, mask, targets = collate(seqs[start:start + batch_size])
        hidden = encoder.hidden_states(ids, segs, mask)
        loss, c, k = mlm_loss(encoder, hidden, targets)
        if loss is not None:
            total += loss.item() * k
            n += k
            correct += c
    return total / n, correct / n
