"""Contrastive intermediate pretraining for retrieval.

From each passage, sample a pair of units (sentences by default, random
token spans as the alternative). Each unit must be told apart from every
other unit in the batch: its partner is the target among the 2m-1
non-anchor candidates, scored by raw inner products of first-token
embeddings. A masked-LM term over separately masked copies keeps the
backbone's original self-supervised objective; the combined step loss is
the mean over the 2m units of (mlm + contrastive) per unit.

Two modes: "backbone" updates the whole model (no prompts involved);
"prompts_only" freezes the backbone and trains a prompt set instead.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor, backward
from .encoder import (
    MaskedSequence,
    apply_mlm_masking,
    encode_states,
    mlm_logits,
    prefix_kv,
    save_checkpoint,
)
from .prompts import PromptSet, save_promptset
from .tokenizer import MASK_ID, tokenize_words

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


@dataclass
class PretrainUnitConfig:
    unit: str = "sentence"  # or "span"
    min_sentence_tokens: int = 3
    span_min: int = 4
    span_max: int = 8

    def __post_init__(self):
        if self.unit not in ("sentence", "span"):
            raise ValueError(f"unknown unit kind: {self.unit}")
        if self.unit == "span" and not (1 <= self.span_min <= self.span_max):
            raise ValueError("invalid span length range")


@dataclass
class PretrainConfig:
    mode: str = "backbone"  # or "prompts_only"
    epochs: int = 1
    batch_size: int = 8  # passages per batch (m)
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    seed: int = 0
    mask_rate: float = 0.15
    unit: PretrainUnitConfig = field(default_factory=PretrainUnitConfig)

    def __post_init__(self):
        if self.mode not in ("backbone", "prompts_only"):
            raise ValueError(f"unknown pretraining mode: {self.mode}")


@dataclass
class PretrainStepReport:
    step: int
    contrastive: float
    mlm: float
    combined: float
    learning_rate: float
    mean_partner_rank: float

    def to_dict(self):
        return {
            "step": self.step,
            "contrastive": self.contrastive,
            "mlm": self.mlm,
            "combined": self.combined,
            "learning_rate": self.learning_rate,
            "mean_partner_rank": self.mean_partner_rank,
        }


# ---------------------------------------------------------------------------
# Unit splitting and batch sampling
# ---------------------------------------------------------------------------


def split_units(text, cfg, rng=None):
    """Units of a passage.

    Sentence mode: split after sentence-final punctuation, merge fragments
    shorter than the token minimum into the following sentence (a trailing
    short fragment joins the previous unit). Span mode: two random token
    windows with lengths drawn from the configured range (needs rng).
    """
    text = text.strip()
    if not text:
        raise ValueError("split_units: empty text")
    if cfg.unit == "sentence":
        units, buffer = [], ""
        for part in _SENTENCE_SPLIT.split(text):
            candidate = f"{buffer} {part}".strip() if buffer else part
            if len(tokenize_words(candidate)) >= cfg.min_sentence_tokens:
                units.append(candidate)
                buffer = ""
            else:
                buffer = candidate
        if buffer:
            if units:
                units[-1] = f"{units[-1]} {buffer}"
            else:
                units = [buffer]
        return units

    if rng is None:
        raise ValueError("span mode requires an rng")
    tokens = tokenize_words(text)
    if span_window_count(len(tokens), cfg) < 1:
        return []
    first = _draw_span(tokens, cfg, rng)
    for _ in range(20):
        second = _draw_span(tokens, cfg, rng)
        if second != first:
            return [" ".join(tokens[s:e]) for s, e in (first, second)]
    return [" ".join(tokens[first[0]:first[1]])]


def _draw_span(tokens, cfg, rng):
    hi = min(cfg.span_max, len(tokens))
    length = int(rng.integers(cfg.span_min, hi + 1))
    start = int(rng.integers(0, len(tokens) - length + 1))
    return (start, start + length)


def span_window_count(n_tokens, cfg):
    """Number of distinct (start, length) windows available."""
    total = 0
    for length in range(cfg.span_min, min(cfg.span_max, n_tokens) + 1):
        total += n_tokens - length + 1
    return total


class PreparedCorpus:
    """Pre-split corpus with pairing eligibility and a skip report."""

    def __init__(self, corpus, cfg):
        self.cfg = cfg
        self.passages = []  # (pid, text, units-or-None)
        skipped = 0
        for pid, text in corpus:
            if cfg.unit == "sentence":
                units = split_units(text, cfg)
                ok = len(units) >= 2
            else:
                units = None
                ok = span_window_count(len(tokenize_words(text)), cfg) >= 2
            if ok:
                self.passages.append((pid, text, units))
            else:
                skipped += 1
        self.skip_report = {
            "skipped_passages": skipped,
            "reasons": {"too_few_units": skipped},
        }

    def __len__(self):
        return len(self.passages)


@dataclass
class PretrainBatch:
    passage_ids: list
    units: list  # m (unit_a, unit_b) string pairs
    token_ids: list  # 2m sequences, pair-major order
    masked: list  # 2m MaskedSequence


def sample_batch(corpus, cfg, m, rng, vocab, max_seq_len, mask_rate=0.15):
    """m distinct eligible passages, two distinct units each, plus masked
    copies. Guarantees at least one masked position per batch whenever
    masking is enabled and any unit has a maskable token."""
    prepared = corpus if isinstance(corpus, PreparedCorpus) else PreparedCorpus(corpus, cfg)
    if len(prepared) < m:
        raise ValueError(
            f"sample_batch: need {m} eligible passages, have {len(prepared)}"
        )
    picks = rng.choice(len(prepared), size=m, replace=False)
    passage_ids, pairs = [], []
    for i in picks:
        pid, text, units = prepared.passages[int(i)]
        if cfg.unit == "sentence":
            a, b = rng.choice(len(units), size=2, replace=False)
            pair = (units[int(a)], units[int(b)])
        else:
            drawn = split_units(text, cfg, rng=rng)
            if len(drawn) < 2:
                drawn = drawn * 2  # degenerate single-window passage
            pair = (drawn[0], drawn[1])
        passage_ids.append(pid)
        pairs.append(pair)

    token_ids = []
    for a, b in pairs:
        token_ids.append(vocab.encode(a, max_len=max_seq_len))
        token_ids.append(vocab.encode(b, max_len=max_seq_len))
    masked = []
    if mask_rate > 0:
        masked = [
            apply_mlm_masking(ids, len(vocab), rng, rate=mask_rate)
            for ids in token_ids
        ]
        if not any(seq.positions for seq in masked):
            _force_one_mask(masked)
    else:
        masked = [MaskedSequence(list(ids), [], []) for ids in token_ids]
    return PretrainBatch(passage_ids, pairs, token_ids, masked)


def _force_one_mask(masked):
    from .tokenizer import SPECIALS

    for seq in masked:
        for pos, tok in enumerate(seq.ids):
            if tok >= len(SPECIALS):
                seq.positions.append(pos)
                seq.labels.append(tok)
                seq.ids[pos] = MASK_ID
                return


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def default_pairing(n):
    if n < 2 or n % 2:
        raise ValueError("pairing needs an even number of embeddings >= 2")
    return [i + 1 if i % 2 == 0 else i - 1 for i in range(n)]


def contrastive_loss(embeddings, pairing=None):
    """Mean over anchors of -log softmax(partner | all non-anchor scores).

    The denominator ranges over every other batch element (the partner
    included, as the numerator term); only the anchor itself is excluded.
    Accepts a list of 1 x d graph tensors or a plain (2m, d) array.
    """
    if isinstance(embeddings, np.ndarray):
        rows = Tensor(embeddings)
        n = embeddings.shape[0]
    else:
        embeddings = list(embeddings)
        n = len(embeddings)
        rows = embeddings[0] if n == 1 else ad.concat(embeddings, axis=0)
    if pairing is None:
        pairing = default_pairing(n)
    if len(pairing) != n or any(
        pairing[a] == a or pairing[pairing[a]] != a for a in range(n)
    ):
        raise ValueError("pairing must be a fixed-point-free involution")

    scores = ad.matmul(rows, ad.transpose(rows))
    losses = []
    for a in range(n):
        row = ad.slice_(scores, 0, a, a + 1)
        pieces = []
        if a > 0:
            pieces.append(ad.slice_(row, 1, 0, a))
        if a + 1 < n:
            pieces.append(ad.slice_(row, 1, a + 1, n))
        others = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)
        target = pairing[a] if pairing[a] < a else pairing[a] - 1
        losses.append(ad.cross_entropy_rows(others, [target]))
    return ad.average(losses)


def partner_ranks(score_matrix, pairing=None):
    """1-based rank of each anchor's partner among the non-anchor scores."""
    s = np.asarray(score_matrix)
    n = s.shape[0]
    if pairing is None:
        pairing = default_pairing(n)
    ranks = []
    for a in range(n):
        partner = pairing[a]
        row = s[a]
        better = sum(
            1 for o in range(n) if o not in (a, partner) and row[o] > row[partner]
        )
        ranks.append(1 + better)
    return ranks


def rip_loss(batch, model, prompts=None, dropout_rng=None):
    """Combined pretraining loss for one batch plus its report fields.

    Embeddings come from the unmasked copies; the masked-LM term uses the
    separately masked copies. Per the batch-mean definition, the combined
    value is mean_units(mlm) + mean_anchors(contrastive).
    """
    prefix = None
    if prompts is not None and prompts.prompt_length > 0:
        prompts.check_compatible(model.config)
        prefix = prefix_kv(model, prompts.realize("query"))

    emb_nodes = []
    for ids in batch.token_ids:
        states = encode_states(model, ids, prefix=prefix, dropout_rng=dropout_rng)
        emb_nodes.append(ad.slice_(states, 0, 0, 1))
    l_c = contrastive_loss(emb_nodes)

    unit_losses = []
    for seq in batch.masked:
        if seq.positions:
            states = encode_states(model, seq.ids, prefix=prefix, dropout_rng=dropout_rng)
            logits = mlm_logits(model, states, seq.positions)
            unit_losses.append(ad.cross_entropy_rows(logits, seq.labels))
        else:
            unit_losses.append(Tensor(0.0))
    l_s = ad.average(unit_losses)
    combined = ad.add(l_s, l_c)

    embs = np.vstack([e.data[0] for e in emb_nodes])
    ranks = partner_ranks(embs @ embs.T)
    report = {
        "contrastive": l_c.item(),
        "mlm": l_s.item(),
        "combined": combined.item(),
        "mean_partner_rank": float(np.mean(ranks)),
    }
    return combined, report


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: object
    prompts: object
    log: list
    skip_report: dict


def pretrain(corpus, model, config, prompts=None, out_dir=None):
    """Run intermediate pretraining; deterministic given config.seed."""
    prepared = PreparedCorpus(corpus, config.unit)
    m = config.batch_size
    if len(prepared) < m:
        raise ValueError(
            f"pretrain: corpus has {len(prepared)} eligible passages, "
            f"batch needs {m}"
        )

    if config.mode == "backbone":
        if prompts is not None:
            raise ValueError("backbone mode pretrains the bare model; prompts must be None")
        model.set_trainable(True)
        if config.mask_rate > 0:
            params = model.parameters()
        else:
            model.params["mlm_bias"].requires_grad = False
            params = model.encoder_parameters()
    else:
        model.set_trainable(False)
        if prompts is None:
            cfg = model.config
            prompts = PromptSet.create(
                "pretrain", cfg.prompt_length, cfg.hidden_size, cfg.num_layers,
                reparam_mode=cfg.reparam_mode, mlp_hidden=cfg.mlp_hidden,
                seed=config.seed,
            )
        prompts.set_trainable(True)
        params = prompts.parameters()

    log = []
    if config.epochs > 0:
        steps_per_epoch = max(1, len(prepared) // m)
        total_steps = config.epochs * steps_per_epoch
        optimizer = AdamW(
            params,
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
            warmup_ratio=config.warmup_ratio,
            total_steps=total_steps,
        )
        rng = np.random.default_rng(config.seed)
        for epoch in range(config.epochs):
            for _ in range(steps_per_epoch):
                batch = sample_batch(
                    prepared, config.unit, m, rng, model.vocab,
                    model.config.max_seq_len, mask_rate=config.mask_rate,
                )
                loss, rep = rip_loss(
                    batch, model, prompts if config.mode == "prompts_only" else None,
                )
                if not math.isfinite(rep["combined"]):
                    raise RuntimeError(
                        f"pretrain: non-finite loss at step {optimizer.step_count + 1}"
                    )
                backward(loss)
                optimizer.step()
                log.append(PretrainStepReport(
                    step=optimizer.step_count,
                    learning_rate=optimizer.lr_at(optimizer.step_count),
                    **rep,
                ))
            if out_dir is not None:
                _save_epoch(model, prompts, config, out_dir, epoch)

    model.set_trainable(False)
    if prompts is not None:
        prompts.set_trainable(False)
    if out_dir is not None:
        from .dataio import write_json, write_jsonl

        write_jsonl([r.to_dict() for r in log], os.path.join(out_dir, "pretrain_log.jsonl"))
        write_json(prepared.skip_report, os.path.join(out_dir, "skip_report.json"))
        if config.mode == "backbone":
            save_checkpoint(model, os.path.join(out_dir, "model.ckpt"))
        else:
            save_promptset(prompts, os.path.join(out_dir, "pretrained_prompts.json"))
    return PretrainResult(model=model, prompts=prompts, log=log,
                          skip_report=prepared.skip_report)


def _save_epoch(model, prompts, config, out_dir, epoch):
    if config.mode == "backbone":
        save_checkpoint(model, os.path.join(out_dir, f"model_epoch{epoch}.ckpt"))
    else:
        save_promptset(prompts, os.path.join(out_dir, f"prompts_epoch{epoch}.json"))
