"""Supervised dual-encoder training.

Ranking loss: negative log-likelihood of the positive passage against the
mined negatives, with raw inner-product scores (no temperature, no
normalization). With in-batch negatives enabled, every other example's
positive and mined negatives join each query's denominator; any candidate
that is a known positive of the query is masked out.

Two modes: "dpt" trains only the prompt set against a frozen backbone;
"ft" trains the full backbone without prompts.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, backward
from .encoder import prefix_kv, save_checkpoint
from .prompts import PromptSet, save_promptset


@dataclass
class TrainingExample:
    qid: str
    query: str
    pos_pid: str
    neg_pids: list
    neg_tags: list = field(default_factory=list)

    def __post_init__(self):
        if self.pos_pid in self.neg_pids:
            raise ValueError(
                f"example {self.qid}: positive {self.pos_pid} listed among negatives"
            )
        if self.neg_tags and len(self.neg_tags) != len(self.neg_pids):
            raise ValueError(f"example {self.qid}: neg_tags length mismatch")
        if len(set(self.neg_pids)) != len(self.neg_pids):
            raise ValueError(f"example {self.qid}: duplicate negatives")


@dataclass
class TrainConfig:
    mode: str = "dpt"  # or "ft"
    learning_rate: float = 7e-3
    epochs: int = 10
    batch_size: int = 8
    negatives_per_query: int = 8
    use_in_batch_negatives: bool = True
    seed: int = 0
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    separate_prompts: bool = False

    def __post_init__(self):
        if self.mode not in ("dpt", "ft"):
            raise ValueError(f"unknown training mode: {self.mode}")


@dataclass
class TrainStepReport:
    step: int
    loss: float
    learning_rate: float
    grad_norm: float

    def to_dict(self):
        return {
            "step": self.step,
            "loss": self.loss,
            "learning_rate": self.learning_rate,
            "grad_norm": self.grad_norm,
        }


class TrainingDivergedError(RuntimeError):
    def __init__(self, example_ids, value):
        self.example_ids = list(example_ids)
        super().__init__(
            f"non-finite loss ({value}) on examples {self.example_ids}"
        )


def similarity(q_vec, p_vec):
    """Raw inner product between two d-dimensional vectors."""
    q = np.asarray(q_vec, dtype=np.float64)
    p = np.asarray(p_vec, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise ValueError(f"similarity: dimension mismatch {q.shape} vs {p.shape}")
    return float(q @ p)


def nll_loss(pos_score, neg_scores):
    """-log softmax probability of the positive; log-sum-exp stabilized."""
    scores = np.concatenate([[float(pos_score)], np.asarray(neg_scores, dtype=np.float64)])
    m = scores.max()
    lse = m + math.log(np.exp(scores - m).sum())
    return float(lse - scores[0])


def _grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


class _EncoderCache:
    """Tokenization cache plus per-step encoding with shared prefix nodes."""

    def __init__(self, model, prompts):
        self.model = model
        self.prompts = prompts
        self.token_ids = {}

    def tokens(self, text):
        ids = self.token_ids.get(text)
        if ids is None:
            ids = self.model.vocab.encode(text, max_len=self.model.config.max_seq_len)
            self.token_ids[text] = ids
        return ids

    def step_prefixes(self):
        """Per-role prefix K/V graph nodes, computed once per train step."""
        if self.prompts is None or self.prompts.prompt_length == 0:
            return None
        self.prompts.check_compatible(self.model.config)
        prefixes = {}
        for role in ("query", "passage"):
            key = self.prompts.resolve_role(role)
            if key not in prefixes:
                prefixes[key] = prefix_kv(self.model, self.prompts.realize(key))
            prefixes[role] = prefixes[key]
        return prefixes

    def encode(self, text, role, prefixes):
        from .encoder import encode_states

        prefix = None if prefixes is None else prefixes[role]
        states = encode_states(self.model, self.tokens(text), prefix=prefix)
        return ad.slice_(states, 0, 0, 1)


def batch_candidates(batch, config, positives_of):
    """Candidate passage ids per example: own positive first, then own
    negatives, then (optionally) the other examples' positives and
    negatives. Known positives of the query and duplicates are dropped."""
    n = config.negatives_per_query
    out = []
    for i, ex in enumerate(batch):
        own_positives = positives_of.get(ex.qid, {ex.pos_pid})
        cands = [ex.pos_pid]
        seen = {ex.pos_pid}

        def push(pid):
            if pid in seen or pid in own_positives:
                return
            seen.add(pid)
            cands.append(pid)

        for pid in ex.neg_pids[:n]:
            push(pid)
        if config.use_in_batch_negatives:
            for j, other in enumerate(batch):
                if j == i:
                    continue
                push(other.pos_pid)
                for pid in other.neg_pids[:n]:
                    push(pid)
        out.append(cands)
    return out


def train_step(batch, model, prompts, config, optimizer, corpus_texts,
               positives_of, cache=None):
    """One optimizer step over a batch; returns the step report."""
    if not batch:
        raise ValueError("train_step: empty batch")
    cache = cache or _EncoderCache(model, prompts)
    prefixes = cache.step_prefixes()

    per_example = batch_candidates(batch, config, positives_of)
    needed = sorted({pid for cands in per_example for pid in cands})
    missing = [pid for pid in needed if pid not in corpus_texts]
    if missing:
        raise KeyError(f"passage ids not in corpus: {missing[:5]}")

    # encode each unique passage and query once per step
    p_vecs = {pid: cache.encode(corpus_texts[pid], "passage", prefixes) for pid in needed}
    losses = []
    for ex, cands in zip(batch, per_example):
        q_vec = cache.encode(ex.query, "query", prefixes)
        pmat = ad.concat([p_vecs[pid] for pid in cands], axis=0)
        scores = ad.matmul(q_vec, ad.transpose(pmat))
        losses.append(ad.cross_entropy_rows(scores, [0]))
    loss = ad.average(losses)

    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError([ex.qid for ex in batch], value)

    backward(loss)
    gnorm = _grad_norm(optimizer.params)
    optimizer.step()
    return TrainStepReport(
        step=optimizer.step_count,
        loss=value,
        learning_rate=optimizer.lr_at(optimizer.step_count),
        grad_norm=gnorm,
    )


@dataclass
class TrainResult:
    model: object
    prompts: object
    log: list


def train(dataset, corpus_texts, model, prompts, config, out_dir=None, qrels=None):
    """Full training loop; deterministic given config.seed.

    dpt mode trains (or creates) the prompt set with the backbone frozen;
    ft mode trains the backbone itself and forbids prompts. Per-epoch
    checkpoints and a JSON-lines log of step reports land in out_dir.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    if isinstance(corpus_texts, list):
        corpus_texts = dict(corpus_texts)

    if config.mode == "ft":
        if prompts is not None:
            raise ValueError("ft mode trains the backbone; prompts must be None")
        model.set_trainable(True)
        model.params["mlm_bias"].requires_grad = False  # not on the encode path
        train_params = model.encoder_parameters()
    else:
        model.set_trainable(False)
        if prompts is None:
            cfg = model.config
            prompts = PromptSet.create(
                "task", cfg.prompt_length, cfg.hidden_size, cfg.num_layers,
                reparam_mode=cfg.reparam_mode, mlp_hidden=cfg.mlp_hidden,
                separate_roles=config.separate_prompts, seed=config.seed,
            )
        prompts.set_trainable(True)
        train_params = prompts.parameters()

    positives_of = {}
    for ex in dataset:
        positives_of.setdefault(ex.qid, set()).add(ex.pos_pid)
    if qrels:
        for qid, pids in qrels.items():
            positives_of.setdefault(qid, set()).update(pids)

    log = []
    if config.epochs > 0:
        n_batches = math.ceil(len(dataset) / config.batch_size)
        optimizer = AdamW(
            train_params,
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
            warmup_ratio=config.warmup_ratio,
            total_steps=config.epochs * n_batches,
        )
        cache = _EncoderCache(model, prompts if config.mode == "dpt" else None)
        rng = np.random.default_rng(config.seed)
        for epoch in range(config.epochs):
            order = rng.permutation(len(dataset))
            for b in range(n_batches):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch = [dataset[int(i)] for i in idx]
                report = train_step(
                    batch, model, prompts if config.mode == "dpt" else None,
                    config, optimizer, corpus_texts, positives_of, cache,
                )
                log.append(report)
            if out_dir is not None:
                _save_epoch(model, prompts, config, out_dir, epoch)

    model.set_trainable(False)
    if prompts is not None:
        prompts.set_trainable(False)
    if out_dir is not None:
        from .dataio import write_jsonl

        write_jsonl([r.to_dict() for r in log], os.path.join(out_dir, "train_log.jsonl"))
        if config.mode == "dpt":
            save_promptset(prompts, os.path.join(out_dir, "prompts.json"))
        else:
            save_checkpoint(model, os.path.join(out_dir, "model_ft.ckpt"))
    return TrainResult(model=model, prompts=prompts, log=log)


def _save_epoch(model, prompts, config, out_dir, epoch):
    if config.mode == "dpt":
        save_promptset(prompts, os.path.join(out_dir, f"prompts_epoch{epoch}.json"))
    else:
        save_checkpoint(model, os.path.join(out_dir, f"model_epoch{epoch}.ckpt"))
