"""BERT-style bidirectional encoder with MLM, pair-prediction and relevance heads."""

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MASK_NEG = -1e9
CKPT_MAGIC = b"CTNK"
CKPT_VERSION = 1
STAGES = ("pretrained", "coarse", "finetuned", "cont-pre")

NOT_PAIR, IS_PAIR = 0, 1


class CheckpointError(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden: int = 128
    heads: int = 2
    ffn: int = 512
    vocab_size: int = 30522
    max_len: int = 256
    n_segments: int = 2
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_len < 8:
            raise ValueError("max_len must be at least 8")
        if min(self.n_layers, self.hidden, self.heads, self.ffn, self.vocab_size) < 1:
            raise ValueError("model dimensions must be positive")
        if self.n_segments != 2:
            raise ValueError("exactly two segments are supported")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not self.init_std > 0.0:
            raise ValueError("init_std must be positive")

    @property
    def head_dim(self):
        return self.hidden // self.heads


# Named size presets; vocab_size is filled in from the vocabulary.
PRESETS = {
    "bert-tiny": dict(n_layers=2, hidden=128, heads=2, ffn=512, max_len=256),
    # 0.02 is tuned for wide models; at H=32 it leaves the attention path
    # near zero and training stalls, so the toy size starts wider.  Dropout
    # only slows learning on desk-sized data.
    "toy": dict(n_layers=2, hidden=32, heads=2, ffn=64, max_len=128, init_std=0.1, dropout=0.0),
    "gradcheck": dict(n_layers=2, hidden=8, heads=2, ffn=16, max_len=16, dropout=0.0),
}


def preset(name, vocab_size, **overrides):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **kw)


def param_shapes(cfg):
    """Ordered manifest of parameter names and shapes for ``cfg``."""
    H, F, V = cfg.hidden, cfg.ffn, cfg.vocab_size
    shapes = {
        "embeddings.token": (V, H),
        "embeddings.position": (cfg.max_len, H),
        "embeddings.segment": (cfg.n_segments, H),
        "embeddings.ln.gain": (H,),
        "embeddings.ln.bias": (H,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (H, H)
            shapes[p + f"attn.{proj}.bias"] = (H,)
        shapes[p + "attn_ln.gain"] = (H,)
        shapes[p + "attn_ln.bias"] = (H,)
        shapes[p + "ffn.in.weight"] = (H, F)
        shapes[p + "ffn.in.bias"] = (F,)
        shapes[p + "ffn.out.weight"] = (F, H)
        shapes[p + "ffn.out.bias"] = (H,)
        shapes[p + "ffn_ln.gain"] = (H,)
        shapes[p + "ffn_ln.bias"] = (H,)
    shapes["mlm.transform.weight"] = (H, H)
    shapes["mlm.transform.bias"] = (H,)
    shapes["mlm.ln.gain"] = (H,)
    shapes["mlm.ln.bias"] = (H,)
    shapes["mlm.output_bias"] = (V,)
    shapes["qdpp.weight"] = (H, 2)
    shapes["relevance.weight"] = (H, 2)
    return shapes


def truncated_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _init_value(name, shape, rng, std):
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith("bias"):
        return np.zeros(shape)
    return truncated_normal(rng, shape, std)


@dataclass
class CheckpointMeta:
    stage: str = "pretrained"
    seeds: list = field(default_factory=list)
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")


class Encoder:
    """Transformer trunk plus three heads sharing it.

    Parameters live in ``self.params`` (name -> Tensor).  Without an active
    tape every method is a pure function of the weights.
    """

    def __init__(self, config, params):
        self.config = config
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise CheckpointError(f"parameter manifest mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, t in params.items():
            if t.shape != expected[name]:
                raise CheckpointError(f"{name}: shape {t.shape} != expected {expected[name]}")
            t.requires_grad = True
            t.name = name
        self.params = params

    @classmethod
    def initialize(cls, config, seed):
        rng = np.random.default_rng(seed)
        params = {name: Tensor(_init_value(name, shape, rng, config.init_std), requires_grad=True, name=name)
                  for name, shape in param_shapes(config).items()}
        return cls(config, params)

    def copy(self):
        return Encoder(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reset_relevance_head(self, seed=None, from_qdpp=False):
        """Fresh relevance classifier; optionally a copy of the pair-prediction head."""
        if from_qdpp:
            value = self.params["qdpp.weight"].data.copy()
        else:
            value = truncated_normal(np.random.default_rng(seed), (self.config.hidden, 2), self.config.init_std)
        self.params["relevance.weight"] = Tensor(value, requires_grad=True, name="relevance.weight")

    # -- trunk -------------------------------------------------------------

    def _linear(self, x, prefix):
        return nx.add(nx.matmul(x, self.params[prefix + ".weight"]), self.params[prefix + ".bias"])

    def hidden_states(self, ids, segments, attention_mask, rng=None):
        """Run the encoder over a batch ``[B, T]`` (or one sequence ``[T]``).

        Returns hidden states ``[B, T, H]`` (``[T, H]`` for a single sequence).
        ``rng`` enables dropout; pass ``None`` for deterministic inference.
        """
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
            segments = np.asarray(segments)[None]
            attention_mask = np.asarray(attention_mask)[None]
        B, T = ids.shape
        if T > cfg.max_len:
            raise SequenceTooLong(f"sequence length {T} exceeds max_len {cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range for vocabulary size {cfg.vocab_size}")
        return self._forward(ids, segments, attention_mask, rng, single=single)

    def _forward(self, ids, segments, attention_mask, rng, capture=None, capture_upto=0, single=False):
        cfg = self.config
        B, T = ids.shape
        p = self.params
        drop = cfg.dropout if rng is not None else 0.0

        x = nx.embedding(p["embeddings.token"], ids)
        x = nx.add(x, nx.embedding(p["embeddings.position"], np.arange(T)))
        x = nx.add(x, nx.embedding(p["embeddings.segment"], np.asarray(segments, dtype=np.int64)))
        x = nx.layer_norm(x, p["embeddings.ln.gain"], p["embeddings.ln.bias"])
        x = nx.dropout(x, drop, rng)

        mask = np.asarray(attention_mask, dtype=np.float64)
        attn_bias = Tensor(((1.0 - mask) * MASK_NEG)[:, None, None, :])
        A, d = cfg.heads, cfg.head_dim
        inv = 1.0 / math.sqrt(d)

        def split_heads(t):
            return nx.transpose(nx.reshape(t, (B, T, A, d)), (0, 2, 1, 3))

        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            q = split_heads(self._linear(x, pre + "attn.query"))
            k = split_heads(self._linear(x, pre + "attn.key"))
            v = split_heads(self._linear(x, pre + "attn.value"))
            scores = nx.add(nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), inv), attn_bias)
            probs = nx.softmax(scores)
            if capture is not None:
                capture.append(probs.data)
                if len(capture) == capture_upto:
                    return None
            probs = nx.dropout(probs, drop, rng)
            ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (B, T, cfg.hidden))
            attn = nx.dropout(self._linear(ctx, pre + "attn.output"), drop, rng)
            x = nx.layer_norm(nx.add(x, attn), p[pre + "attn_ln.gain"], p[pre + "attn_ln.bias"])
            ff = self._linear(nx.gelu(self._linear(x, pre + "ffn.in")), pre + "ffn.out")
            ff = nx.dropout(ff, drop, rng)
            x = nx.layer_norm(nx.add(x, ff), p[pre + "ffn_ln.gain"], p[pre + "ffn_ln.bias"])

        if single:
            x = nx.reshape(x, (T, cfg.hidden))
        return x

    def attention_probs(self, ids, segments, attention_mask, layer=0):
        """Attention distribution of one layer, ``[B, A, T, T]`` (inference only)."""
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} out of range")
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        capture = []
        self._forward(ids, np.atleast_2d(segments), np.atleast_2d(attention_mask), None,
                      capture, layer + 1)
        return capture[layer]

    # -- heads -------------------------------------------------------------

    def mlm_logits(self, hidden, positions):
        """Vocabulary logits at masked positions.

        ``positions`` is a list of token indices for a single ``[T, H]``
        sequence, or a ``(batch_idx, token_idx)`` pair of arrays for ``[B, T, H]``.
        """
        p = self.params
        if hidden.ndim == 2:
            pos = np.asarray(positions, dtype=np.int64).reshape(-1)
            if pos.size and (pos.min() < 0 or pos.max() >= hidden.shape[0]):
                raise IndexError("masked position out of range")
            index = (pos,)
        else:
            b_idx, t_idx = (np.asarray(a, dtype=np.int64).reshape(-1) for a in positions)
            if t_idx.size and (t_idx.min() < 0 or t_idx.max() >= hidden.shape[1]):
                raise IndexError("masked position out of range")
            index = (b_idx, t_idx)
        V = self.config.vocab_size
        if index[0].size == 0:
            return Tensor(np.zeros((0, V)))
        h = nx.take(hidden, index)
        h = nx.gelu(nx.add(nx.matmul(h, p["mlm.transform.weight"]), p["mlm.transform.bias"]))
        h = nx.layer_norm(h, p["mlm.ln.gain"], p["mlm.ln.bias"])
        return nx.add(nx.matmul(h, nx.transpose(p["embeddings.token"])), p["mlm.output_bias"])

    def _cls(self, hidden):
        if hidden.ndim == 2:
            return nx.take(hidden, (np.array([0]),))
        B = hidden.shape[0]
        return nx.take(hidden, (np.arange(B), np.zeros(B, dtype=np.int64)))

    def qdpp_logits(self, hidden):
        """``[NotPair, IsPair]`` logits from the [CLS] row; ``[2]`` or ``[B, 2]``."""
        out = nx.matmul(self._cls(hidden), self.params["qdpp.weight"])
        return nx.reshape(out, (2,)) if hidden.ndim == 2 else out

    def relevance_logits(self, hidden):
        """``[non-relevant, relevant]`` logits from the [CLS] row."""
        out = nx.matmul(self._cls(hidden), self.params["relevance.weight"])
        return nx.reshape(out, (2,)) if hidden.ndim == 2 else out


def relevance_score(logits):
    """Probability of the relevant class for logits ``[..., 2]``."""
    logits = np.asarray(logits, dtype=np.float64)
    return nx.softmax_np(logits)[..., 1]


# ---------------------------------------------------------------------------
# checkpoint file: magic, u32 version, u64 header length, JSON header, f64 LE data


def save_checkpoint(encoder, meta, path):
    cfg = encoder.config
    manifest = []
    offset = 0
    for name, t in encoder.params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.data.size * 8
    header = json.dumps({"config": asdict(cfg), "meta": asdict(meta), "tensors": manifest},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for t in encoder.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, vocab=None):
    """Read a checkpoint; returns ``(encoder, meta)``.

    With ``vocab`` given, its size must equal the checkpoint's vocab_size.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 16 + hlen
    if start > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:start].decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        meta = CheckpointMeta(**header["meta"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    expected = param_shapes(cfg)
    if [m["name"] for m in manifest] != list(expected):
        raise CheckpointError(f"{path}: tensor manifest does not match the model config")
    params = {}
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != expected[m["name"]]:
            raise CheckpointError(f"{path}: {m['name']} has shape {shape}, expected {expected[m['name']]}")
        n = int(np.prod(shape))
        lo = start + int(m["offset"])
        hi = lo + n * 8
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data at {m['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=lo).astype(np.float64).reshape(shape)
        params[m["name"]] = Tensor(arr, requires_grad=True, name=m["name"])
    if start + sum(int(np.prod(m["shape"])) for m in manifest) * 8 != len(blob):
        raise CheckpointError(f"{path}: trailing or missing bytes after tensor data")
    if vocab is not None and len(vocab) != cfg.vocab_size:
        raise CheckpointError(f"{path}: vocab_size {cfg.vocab_size} != vocabulary file size {len(vocab)}")
    return Encoder(cfg, params), meta
