"""Bi-encoder training: hard + in-batch negatives, temperature-scaled
InfoNCE, the optimizer loop, and hard-negative mining from ranked runs.

A batch of B examples with m hard negatives each is scored as a dense
[B x B*(1+m)] similarity matrix, so every query faces B*(1+m)-1 negatives:
its own hard negatives plus every other query's positive and negatives.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import ModelCheckpoint
from .errors import ContractError, DataError, NumericError
from .evaluation import Qrels, Run
from .model import (HEAD_NONE, LoraAdapters, ModelConfig, ModelWeights, encode_text,
                    init_weights, trainable_tensors)
from .optim import AdamW
from .text import TokenSequence, Vocabulary, tokenize

logger = logging.getLogger(__name__)


@dataclass
class TrainingExample:
    """One query with its positive document and ordered hard negatives."""

    query_id: str
    positive_doc_id: str
    hard_negative_doc_ids: list[str]

    def __post_init__(self):
        if self.positive_doc_id in self.hard_negative_doc_ids:
            raise ContractError(f"query {self.query_id}: positive document listed as hard negative")
        if len(set(self.hard_negative_doc_ids)) != len(self.hard_negative_doc_ids):
            raise ContractError(f"query {self.query_id}: duplicate hard negatives")


@dataclass
class TrainBatch:
    """Tokenized queries plus the flattened candidate block.

    Candidates are laid out per query as [positive, m negatives], so the
    positive of query i sits at index i*(1+m).
    """

    query_tokens: list[TokenSequence]
    candidate_tokens: list[TokenSequence]
    positive_indices: list[int]
    resampled: int = 0

    @property
    def n_queries(self) -> int:
        return len(self.query_tokens)

    @property
    def negatives_per_query(self) -> int:
        return len(self.candidate_tokens) - 1


def assemble_batch(examples: Sequence[TrainingExample], m: int,
                   doc_store: Mapping[str, str], query_store: Mapping[str, str],
                   vocab: Vocabulary, max_query_tokens: int, max_doc_tokens: int,
                   rng: np.random.Generator) -> TrainBatch:
    """Sample m hard negatives per example and tokenize the whole block.

    Examples short on negatives are padded by resampling with replacement;
    the pad count is reported on the batch so training can surface it.
    """
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    if not examples:
        raise ContractError("empty example list")
    query_tokens, candidate_tokens, positive_indices = [], [], []
    resampled = 0
    for i, ex in enumerate(examples):
        pool = ex.hard_negative_doc_ids
        if not pool:
            raise ContractError(f"query {ex.query_id} has no hard negatives to sample")
        if len(pool) >= m:
            negs = [pool[j] for j in rng.choice(len(pool), size=m, replace=False)]
        else:
            extra = [pool[j] for j in rng.choice(len(pool), size=m - len(pool), replace=True)]
            negs = list(pool) + extra
            resampled += len(extra)
        query_tokens.append(tokenize(query_store[ex.query_id], vocab, max_query_tokens))
        positive_indices.append(i * (1 + m))
        candidate_tokens.append(tokenize(doc_store[ex.positive_doc_id], vocab, max_doc_tokens))
        candidate_tokens.extend(tokenize(doc_store[d], vocab, max_doc_tokens) for d in negs)
    if resampled:
        logger.warning("padded %d hard-negative slots by resampling with replacement", resampled)
    return TrainBatch(query_tokens, candidate_tokens, positive_indices, resampled)


def infonce_loss(sim: Tensor, positive_indices: Sequence[int], temperature: float,
                 tape: Tape | None = None) -> Tensor:
    """Mean over queries of -log softmax(sim / temperature) at the positive."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if sim.data.ndim != 2 or sim.shape[0] != len(positive_indices):
        raise ContractError(f"similarity shape {sim.shape} does not match "
                            f"{len(positive_indices)} positive indices")
    if not np.isfinite(sim.data).all():
        raise NumericError("similarity matrix contains non-finite values")
    log_probs = ad.log_softmax_rows(ad.scale(sim, 1.0 / temperature, tape), tape)
    picked = ad.pick_per_row(log_probs, positive_indices, tape)
    return ad.scale(ad.mean_all(picked, tape), -1.0, tape)


@dataclass
class EncoderTrainConfig:
    """Knobs for the bi-encoder (and, reused, the reranker) training loop."""

    model: ModelConfig
    temperature: float = 0.05
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 8
    negatives_per_query: int = 4
    epochs: int = 1
    seed: int = 0
    finetune: str = "full"  # "full" or "lora"
    max_query_tokens: int = 48
    max_doc_tokens: int = 192
    max_pair_tokens: int | None = None  # reranker template budget; None = model.max_seq_len

    def __post_init__(self):
        if self.finetune not in ("full", "lora"):
            raise ContractError(f"finetune must be 'full' or 'lora', got {self.finetune!r}")
        if self.finetune == "lora" and self.model.lora_rank <= 0:
            raise ContractError("finetune='lora' needs model.lora_rank > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.negatives_per_query < 1:
            raise ContractError("batch_size, epochs and negatives_per_query must be >= 1")


def _encode_block(batch: TrainBatch, weights: ModelWeights,
                  adapters: LoraAdapters | None, tape: Tape) -> tuple[Tensor, Tensor]:
    q = ad.concat_rows([encode_text(t, weights, adapters, tape) for t in batch.query_tokens], tape)
    c = ad.concat_rows([encode_text(t, weights, adapters, tape) for t in batch.candidate_tokens], tape)
    return q, c


def train_retriever(cfg: EncoderTrainConfig, dataset: Sequence[TrainingExample],
                    doc_store: Mapping[str, str], query_store: Mapping[str, str],
                    vocab: Vocabulary) -> tuple[ModelCheckpoint, list[tuple[int, float]]]:
    """InfoNCE training loop; deterministic for a fixed seed (single thread).

    Returns the trained checkpoint and the per-step loss curve.
    """
    if not dataset:
        raise ContractError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    weights = init_weights(cfg.model, seed=cfg.seed)
    adapters = None
    if cfg.finetune == "lora":
        adapters = LoraAdapters.create(cfg.model, seed=cfg.seed + 1)
    params = trainable_tensors(weights, adapters)
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)

    curve: list[tuple[int, float]] = []
    step = 0
    order = np.arange(len(dataset))
    for _ in range(cfg.epochs):
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chunk = [dataset[i] for i in order[start:start + cfg.batch_size]]
            batch = assemble_batch(chunk, cfg.negatives_per_query, doc_store, query_store,
                                   vocab, cfg.max_query_tokens, cfg.max_doc_tokens, rng)
            tape = Tape()
            q, c = _encode_block(batch, weights, adapters, tape)
            sims = ad.matmul(q, ad.transpose(c, tape), tape)
            loss = infonce_loss(sims, batch.positive_indices, cfg.temperature, tape)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"training diverged: loss={value} at step {step}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            curve.append((step, value))
            step += 1
    ckpt = ModelCheckpoint(config=cfg.model, vocab=vocab, weights=weights, adapters=adapters)
    return ckpt, curve


def write_loss_curve(path, curve: list[tuple[int, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")
        for step, value in curve:
            f.write(f"{step},{value:.8f}\n")


# --- hard-negative mining ---


@dataclass
class MiningStats:
    queries_total: int = 0
    queries_mined: int = 0
    queries_skipped_no_positive: int = 0
    queries_skipped_no_candidates: int = 0
    picks_per_source: dict[str, int] = field(default_factory=dict)


def mine_hard_negatives(runs: Mapping[str, Run], qrels: Qrels, depth: int, m: int,
                        blend: Mapping[str, float] | None = None, seed: int = 0,
                        rel_threshold: int = 1) -> tuple[list[TrainingExample], MiningStats]:
    """Sample m negatives per query from the top-depth union of the runs.

    Positives and any document judged relevant (grade > 0) are never
    eligible. Each draw first picks a source by its blend weight (uniform
    when blend is None), then a uniform document from that source's
    remaining pool; a drawn document leaves every pool, keeping negatives
    unique. Queries without a positive, or whose pools are all empty, are
    skipped and counted.
    """
    if not runs:
        raise ContractError("no source runs given")
    if depth < m:
        raise ContractError(f"depth {depth} must be >= m {m}")
    sources = sorted(runs)
    if blend is None:
        weights = {s: 1.0 / len(sources) for s in sources}
    else:
        if set(blend) != set(sources) or any(w < 0 for w in blend.values()) or sum(blend.values()) <= 0:
            raise ContractError("blend weights must cover exactly the given runs and be nonnegative")
        total = sum(blend.values())
        weights = {s: blend[s] / total for s in sources}

    rng = np.random.default_rng(seed)
    stats = MiningStats(picks_per_source={s: 0 for s in sources})
    examples: list[TrainingExample] = []
    for qid in sorted(qrels):
        stats.queries_total += 1
        judged = qrels[qid]
        positives = sorted((d for d, g in judged.items() if g >= rel_threshold),
                           key=lambda d: (-judged[d], d))
        if not positives:
            stats.queries_skipped_no_positive += 1
            continue
        excluded = {d for d, g in judged.items() if g > 0}
        pools: dict[str, list[str]] = {}
        for s in sources:
            ranked = runs[s].entries.get(qid, [])[:depth]
            pools[s] = [d for d, _ in ranked if d not in excluded]
        if not any(pools.values()):
            stats.queries_skipped_no_candidates += 1
            logger.warning("query %s: no eligible negatives within depth %d", qid, depth)
            continue
        negatives: list[str] = []
        taken: set[str] = set()
        while len(negatives) < m:
            live = [s for s in sources if pools[s]]
            if not live:
                break
            probs = np.array([weights[s] for s in live])
            if probs.sum() == 0:
                probs = np.ones(len(live))
            probs = probs / probs.sum()
            src = live[int(rng.choice(len(live), p=probs))]
            pick = pools[src][int(rng.integers(len(pools[src])))]
            negatives.append(pick)
            taken.add(pick)
            stats.picks_per_source[src] += 1
            for s in sources:
                pools[s] = [d for d in pools[s] if d not in taken]
        examples.append(TrainingExample(qid, positives[0], negatives))
        stats.queries_mined += 1
    return examples, stats


# --- training dataset files: one JSON object per line ---


def write_dataset(path, rows: list[dict]) -> None:
    """rows carry {"qid": str, "pos": [ids], "neg": [ids]}."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def examples_to_rows(examples: Sequence[TrainingExample],
                     qrels: Qrels | None = None) -> list[dict]:
    rows = []
    for ex in examples:
        pos = [ex.positive_doc_id]
        if qrels is not None:
            judged = qrels.get(ex.query_id, {})
            pos = sorted((d for d, g in judged.items() if g > 0),
                         key=lambda d: (-judged[d], d)) or pos
        rows.append({"qid": ex.query_id, "pos": pos, "neg": list(ex.hard_negative_doc_ids)})
    return rows


def load_dataset(path) -> list[TrainingExample]:
    """Read example rows; the first listed positive becomes the anchor."""
    examples: list[TrainingExample] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(row, dict) or not row.get("qid") or not row.get("pos") or "neg" not in row:
                raise DataError(f"{path}:{lineno}: need non-empty 'qid', 'pos' and a 'neg' list")
            try:
                examples.append(TrainingExample(str(row["qid"]), str(row["pos"][0]),
                                                [str(d) for d in row["neg"]]))
            except ContractError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not examples:
        raise DataError(f"{path}: empty dataset")
    return examples
