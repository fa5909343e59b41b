"""Miniature transformer encoder with per-layer prompt prefix injection.

The backbone is a post-layernorm encoder stack over a word-level
vocabulary. A prompt set contributes, per layer, an l x d matrix that is
projected through that layer's frozen key/value weights into l extra
attention slots. Prefix slots are key/value only: they carry no positional
embedding and emit no hidden states upward, so each layer's prefix comes
solely from its own matrix.

Sequence embeddings are the final-layer hidden state at position 0 (the
[CLS] slot).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import Vocabulary, SPECIALS, MASK_ID

CHECKPOINT_MAGIC = b"DPTE"
CHECKPOINT_VERSION = 1
LAYER_NORM_EPS = 1e-5


@dataclass
class EncoderConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    ffn_size: int
    vocab_size: int
    max_seq_len: int
    prompt_length: int = 0
    reparam_mode: str = "direct_embedding"  # or "mlp"
    mlp_hidden: int = 0
    dropout_rate: float = 0.0
    pooling: str = "first_token"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")
        for name in ("hidden_size", "num_heads", "ffn_size", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.prompt_length < 0:
            raise ValueError("prompt_length must be >= 0")
        if self.reparam_mode not in ("direct_embedding", "mlp"):
            raise ValueError(f"unknown reparam_mode: {self.reparam_mode}")
        if self.reparam_mode == "mlp" and self.mlp_hidden <= 0:
            raise ValueError("mlp reparametrization needs mlp_hidden > 0")
        if self.pooling != "first_token":
            raise ValueError("only first_token pooling is supported")

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _layer_param_names(k):
    base = f"layer{k}."
    names = [base + n for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
    names += [base + n for n in ("ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")]
    return names


class EncoderModel:
    """Backbone weights plus the vocabulary. Immutable once training ends."""

    def __init__(self, config, vocab, params):
        if len(vocab) != config.vocab_size:
            raise ValueError(
                f"vocab size {len(vocab)} does not match config.vocab_size "
                f"{config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def encoder_parameters(self):
        """Parameters reachable from the encoding path (excludes the MLM
        head bias, which only the masked-LM objective touches)."""
        return [p for name, p in self.params.items() if name != "mlm_bias"]

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = bool(flag)
            p.grad = None

    def checksums(self):
        """Per-array content hash, for freezing assertions."""
        return {
            name: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
            for name, p in self.params.items()
        }

    def fingerprint(self):
        """Stable hash of config, vocabulary, and all weights."""
        return hashlib.sha256(serialize_model(self)).hexdigest()


def init_model(config, vocab, seed=0):
    """Fresh backbone with N(0, 0.02) weights, zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    d, ffn, v = config.hidden_size, config.ffn_size, config.vocab_size

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape))

    params = {
        "tok_emb": w(v, d),
        "pos_emb": w(config.max_seq_len, d),
        "emb_ln_g": Tensor(np.ones(d)),
        "emb_ln_b": Tensor(np.zeros(d)),
        "mlm_bias": Tensor(np.zeros(v)),
    }
    for k in range(config.num_layers):
        base = f"layer{k}."
        for name in ("wq", "wk", "wv", "wo"):
            params[base + name] = w(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[base + name] = Tensor(np.zeros(d))
        params[base + "ln1_g"] = Tensor(np.ones(d))
        params[base + "ln1_b"] = Tensor(np.zeros(d))
        params[base + "w1"] = w(d, ffn)
        params[base + "b1"] = Tensor(np.zeros(ffn))
        params[base + "w2"] = w(ffn, d)
        params[base + "b2"] = Tensor(np.zeros(d))
        params[base + "ln2_g"] = Tensor(np.ones(d))
        params[base + "ln2_b"] = Tensor(np.zeros(d))
    return EncoderModel(config, vocab, params)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def prefix_kv(model, matrices):
    """Project realized prompt matrices through each layer's K/V weights.

    Returns one (keys, values) pair of l x d graph tensors per layer. The
    same computation runs at prompt registration time in the serving
    module, so both paths agree bitwise.
    """
    p = model.params
    pairs = []
    for k, m in enumerate(matrices):
        base = f"layer{k}."
        keys = ad.add(ad.matmul(m, p[base + "wk"]), p[base + "bk"])
        values = ad.add(ad.matmul(m, p[base + "wv"]), p[base + "bv"])
        pairs.append((keys, values))
    return pairs


def _check_ids(model, token_ids):
    from .tokenizer import CLS_ID

    ids = list(token_ids)
    if not ids or ids[0] != CLS_ID:
        raise ValueError("token_ids must begin with [CLS]")
    if len(ids) > model.config.max_seq_len:
        raise ValueError(
            f"sequence length {len(ids)} exceeds max_seq_len "
            f"{model.config.max_seq_len}"
        )
    bad = [i for i in ids if i < 0 or i >= model.config.vocab_size]
    if bad:
        raise ValueError(f"unknown token id {bad[0]} (vocab size {model.config.vocab_size})")
    return ids


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(mask))


def encode_states(model, token_ids, prefix=None, dropout_rng=None):
    """Full final-layer hidden states (T x d) as a graph tensor."""
    cfg = model.config
    p = model.params
    ids = _check_ids(model, token_ids)
    if prefix is not None and len(prefix) not in (0, cfg.num_layers):
        raise ValueError("prefix must supply one (K, V) pair per layer")
    if prefix is not None and len(prefix) == 0:
        prefix = None
    rate = cfg.dropout_rate

    x = ad.embedding_gather(p["tok_emb"], ids)
    x = ad.add(x, ad.slice_(p["pos_emb"], 0, 0, len(ids)))
    x = ad.layer_norm(x, p["emb_ln_g"], p["emb_ln_b"], eps=LAYER_NORM_EPS)
    x = _dropout(x, rate, dropout_rng)

    dh = cfg.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    for k in range(cfg.num_layers):
        base = f"layer{k}."
        q = ad.add(ad.matmul(x, p[base + "wq"]), p[base + "bq"])
        keys = ad.add(ad.matmul(x, p[base + "wk"]), p[base + "bk"])
        values = ad.add(ad.matmul(x, p[base + "wv"]), p[base + "bv"])
        if prefix is not None:
            pk, pv = prefix[k]
            keys = ad.concat([pk, keys], axis=0)
            values = ad.concat([pv, values], axis=0)
        heads = []
        for h in range(cfg.num_heads):
            lo, hi = h * dh, (h + 1) * dh
            qi = ad.slice_(q, 1, lo, hi)
            ki = ad.slice_(keys, 1, lo, hi)
            vi = ad.slice_(values, 1, lo, hi)
            att = ad.softmax(ad.scale(ad.matmul(qi, ad.transpose(ki)), inv_sqrt_dh))
            heads.append(ad.matmul(att, vi))
        attn_out = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        attn_out = ad.add(ad.matmul(attn_out, p[base + "wo"]), p[base + "bo"])
        attn_out = _dropout(attn_out, rate, dropout_rng)
        x = ad.layer_norm(ad.add(x, attn_out), p[base + "ln1_g"], p[base + "ln1_b"], eps=LAYER_NORM_EPS)
        f = ad.add(ad.matmul(x, p[base + "w1"]), p[base + "b1"])
        f = ad.add(ad.matmul(ad.gelu(f), p[base + "w2"]), p[base + "b2"])
        f = _dropout(f, rate, dropout_rng)
        x = ad.layer_norm(ad.add(x, f), p[base + "ln2_g"], p[base + "ln2_b"], eps=LAYER_NORM_EPS)
    return x


def encode_tokens(model, prompts, token_ids, role="query", dropout_rng=None):
    """First-token embedding as a 1 x d graph tensor (training path)."""
    prefix = None
    if prompts is not None and prompts.prompt_length > 0:
        prompts.check_compatible(model.config)
        prefix = prefix_kv(model, prompts.realize(role))
    states = encode_states(model, token_ids, prefix=prefix, dropout_rng=dropout_rng)
    return ad.slice_(states, 0, 0, 1)


def encode(model, prompts, token_ids, role="query"):
    """Inference encode: the d-dimensional first-token vector as ndarray."""
    return encode_tokens(model, prompts, token_ids, role=role).data[0].copy()


# ---------------------------------------------------------------------------
# Masked language modeling
# ---------------------------------------------------------------------------


@dataclass
class MaskedSequence:
    ids: list
    positions: list  # masked positions within ids
    labels: list  # original token ids at those positions


def apply_mlm_masking(ids, vocab_size, rng, rate=0.15):
    """RoBERTa-style masking: 15% of non-special tokens; of those 80%
    become [MASK], 10% a random token, 10% stay unchanged."""
    ids = list(ids)
    out = list(ids)
    positions, labels = [], []
    n_special = len(SPECIALS)
    for pos, tok in enumerate(ids):
        if tok < n_special:
            continue
        if rng.random() >= rate:
            continue
        positions.append(pos)
        labels.append(tok)
        roll = rng.random()
        if roll < 0.8:
            out[pos] = MASK_ID
        elif roll < 0.9:
            out[pos] = int(rng.integers(n_special, vocab_size))
    return MaskedSequence(out, positions, labels)


def mlm_logits(model, states, positions):
    """Tied-head logits at the given row positions of a states tensor."""
    rows = ad.embedding_gather(states, positions)
    return ad.add(ad.matmul(rows, ad.transpose(model.params["tok_emb"])), model.params["mlm_bias"])


def mlm_loss(model, batch, prompts=None, role="query", dropout_rng=None):
    """Mean cross-entropy over all masked positions in the batch."""
    prefix = None
    if prompts is not None and prompts.prompt_length > 0:
        prompts.check_compatible(model.config)
        prefix = prefix_kv(model, prompts.realize(role))
    rows, labels = [], []
    for seq in batch:
        if not seq.positions:
            continue
        states = encode_states(model, seq.ids, prefix=prefix, dropout_rng=dropout_rng)
        rows.append(ad.embedding_gather(states, seq.positions))
        labels.extend(seq.labels)
    if not rows:
        raise ValueError("mlm_loss: batch contains no masked positions")
    gathered = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
    logits = ad.add(
        ad.matmul(gathered, ad.transpose(model.params["tok_emb"])),
        model.params["mlm_bias"],
    )
    return ad.cross_entropy_rows(logits, labels)


# ---------------------------------------------------------------------------
# Parameter partition
# ---------------------------------------------------------------------------


@dataclass
class ParamPartition:
    frozen_count: int
    trainable_count: int

    @property
    def ratio(self):
        total = self.frozen_count + self.trainable_count
        return self.trainable_count / total if total else 0.0


def backbone_param_count(config):
    """Closed-form backbone parameter count for a config."""
    d, ffn, v = config.hidden_size, config.ffn_size, config.vocab_size
    per_layer = 4 * (d * d + d) + (d * ffn + ffn) + (ffn * d + d) + 4 * d
    return v * d + config.max_seq_len * d + 2 * d + v + config.num_layers * per_layer


def param_partition(model, prompts):
    """Exact trainable/frozen split for prompt tuning on this model."""
    frozen = sum(p.size for p in model.parameters())
    trainable = 0 if prompts is None else sum(p.size for p in prompts.parameters())
    return ParamPartition(frozen_count=frozen, trainable_count=trainable)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   magic "DPTE" | u32 version | u32 header_len | header JSON (utf-8)
#   | u32 array_count | array entries in sorted name order.
# Header JSON: {"config": {...}, "vocab": [tokens...]}.
# Array entry: u16 name_len | name utf-8 | u8 ndim | u32 dims... | f64 data.


def serialize_model(model):
    buf = io.BytesIO()
    header = json.dumps(
        {"config": model.config.to_dict(), "vocab": model.vocab.tokens},
        sort_keys=True,
    ).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def deserialize_model(blob):
    buf = io.BytesIO(blob)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    config = EncoderConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocab"])
    (count,) = struct.unpack("<I", buf.read(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
        params[name] = Tensor(arr)
    return EncoderModel(config, vocab, params)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
