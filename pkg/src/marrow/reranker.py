"""Pointwise reranker: pair-template formatting, scalar scoring,
contrastive training without in-batch negatives, candidate reordering.

The model scores the literal template `query: {Q} document: {D}` followed
by eos. Losses are computed per query over its own 1+m candidates only, so
nothing couples queries within a step. Scoring candidate pairs is
embarrassingly parallel; the merge preserves the deterministic
(score desc, doc_id asc) order.
"""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import ModelCheckpoint
from .errors import ConfigError, ContractError, NumericError
from .model import HEAD_SCALAR, LoraAdapters, init_weights, score_head, trainable_tensors
from .optim import AdamW
from .parallel import ordered_map
from .retriever import EncoderTrainConfig, TrainingExample, write_loss_curve
from .text import EOS_ID, TokenSequence, Vocabulary, split_words

logger = logging.getLogger(__name__)

_QUERY_MARKER = "query:"
_DOC_MARKER = "document:"


def format_rerank_input(query: str, doc: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Tokenize `query: {Q} document: {D}` and terminate with eos.

    When the result would exceed max_len, document tokens are dropped
    first; the query is cut only in the degenerate case where it alone
    overflows the budget (the cap always wins). Marker tokens are never
    dropped.
    """
    if max_len < 4:
        raise ContractError(f"max_len must be >= 4, got {max_len}")
    q_marker = [vocab.token_id(w) for w in split_words(_QUERY_MARKER)]
    d_marker = [vocab.token_id(w) for w in split_words(_DOC_MARKER)]
    q_ids = [vocab.token_id(w) for w in split_words(query)]
    d_ids = [vocab.token_id(w) for w in split_words(doc)]

    budget = max_len - 1 - len(q_marker) - len(d_marker)  # room left for Q + D
    truncated = False
    if len(q_ids) > budget:
        q_ids = q_ids[:budget]
        truncated = True
    doc_budget = budget - len(q_ids)
    if len(d_ids) > doc_budget:
        d_ids = d_ids[:doc_budget]
        truncated = True
    return TokenSequence(q_marker + q_ids + d_marker + d_ids + [EOS_ID], truncated)


def score_pair(query: str, doc: str, ckpt: ModelCheckpoint,
               max_len: int | None = None) -> float:
    """Relevance logit for one query-document pair (higher = more relevant)."""
    if ckpt.config.head != HEAD_SCALAR:
        raise ConfigError("checkpoint has no scalar scoring head")
    tokens = format_rerank_input(query, doc, ckpt.vocab,
                                 max_len if max_len is not None else ckpt.config.max_seq_len)
    out = score_head(tokens, ckpt.weights, ckpt.adapters)
    return float(np.float32(out.item()))


def reranker_loss(scores: Tensor, temperature: float = 1.0,
                  tape: Tape | None = None) -> Tensor:
    """-log softmax(scores / temperature) at column 0, averaged over rows.

    Each row holds one query's candidates as [positive, m negatives]; the
    softmax never crosses rows, so other queries in the step are inert.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if scores.data.ndim != 2 or scores.shape[1] < 2:
        raise ContractError(f"need [n_queries x (1+m)] scores with m >= 1, got {scores.shape}")
    if not np.isfinite(scores.data).all():
        raise NumericError("scores contain non-finite values")
    log_probs = ad.log_softmax_rows(ad.scale(scores, 1.0 / temperature, tape), tape)
    picked = ad.pick_per_row(log_probs, [0] * scores.shape[0], tape)
    return ad.scale(ad.mean_all(picked, tape), -1.0, tape)


def rerank(query: str, candidates: Sequence[tuple[str, float]], k: int,
           ckpt: ModelCheckpoint, doc_store: Mapping[str, str],
           keep_tail: bool = True, max_len: int | None = None,
           workers: int | None = None) -> list[tuple[str, float]]:
    """Rescore the top k candidates and sort them by (score desc, doc_id asc).

    The remaining candidates keep their retriever order below the reranked
    block when keep_tail is set. The output is a permutation of the input
    document ids (a prefix of it when keep_tail is off).
    """
    if not candidates:
        return []
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    k = min(k, len(candidates))
    head = list(candidates[:k])
    scores = ordered_map(lambda pair: score_pair(query, doc_store[pair[0]], ckpt, max_len),
                         head, workers)
    reranked = sorted(zip((d for d, _ in head), scores), key=lambda e: (-e[1], e[0]))
    out = list(reranked)
    if keep_tail:
        out.extend(candidates[k:])
    return out


def train_reranker(cfg: EncoderTrainConfig, dataset: Sequence[TrainingExample],
                   doc_store: Mapping[str, str], query_store: Mapping[str, str],
                   vocab: Vocabulary) -> tuple[ModelCheckpoint, list[tuple[int, float]]]:
    """Contrastive training over per-query candidate blocks.

    Negatives come from the retriever run that produced the dataset; no
    in-batch sharing happens, each row's softmax is its own.
    """
    if not dataset:
        raise ContractError("empty training dataset")
    if cfg.model.head != HEAD_SCALAR:
        raise ConfigError("reranker training needs a model config with the scalar head")
    rng = np.random.default_rng(cfg.seed)
    weights = init_weights(cfg.model, seed=cfg.seed)
    adapters = None
    if cfg.finetune == "lora":
        adapters = LoraAdapters.create(cfg.model, seed=cfg.seed + 1)
    params = trainable_tensors(weights, adapters)
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)

    m = cfg.negatives_per_query
    max_len = cfg.max_pair_tokens if cfg.max_pair_tokens else cfg.model.max_seq_len
    if max_len > cfg.model.max_seq_len:
        raise ContractError(f"max_pair_tokens {max_len} exceeds model context "
                            f"{cfg.model.max_seq_len}")
    curve: list[tuple[int, float]] = []
    step = 0
    resampled = 0
    order = np.arange(len(dataset))
    for _ in range(cfg.epochs):
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chunk = [dataset[i] for i in order[start:start + cfg.batch_size]]
            tape = Tape()
            rows = []
            for ex in chunk:
                pool = ex.hard_negative_doc_ids
                if not pool:
                    raise ContractError(f"query {ex.query_id} has no hard negatives")
                if len(pool) >= m:
                    negs = [pool[j] for j in rng.choice(len(pool), size=m, replace=False)]
                else:
                    extra = [pool[j] for j in rng.choice(len(pool), size=m - len(pool), replace=True)]
                    negs = list(pool) + extra
                    resampled += len(extra)
                q_text = query_store[ex.query_id]
                cells = []
                for doc_id in [ex.positive_doc_id] + negs:
                    tokens = format_rerank_input(q_text, doc_store[doc_id], vocab, max_len)
                    cells.append(score_head(tokens, weights, adapters, tape))
                rows.append(ad.concat_cols(cells, tape))
            scores = ad.concat_rows(rows, tape)
            loss = reranker_loss(scores, cfg.temperature, tape)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"training diverged: loss={value} at step {step}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            curve.append((step, value))
            step += 1
    if resampled:
        logger.warning("padded %d negative slots by resampling with replacement", resampled)
    ckpt = ModelCheckpoint(config=cfg.model, vocab=vocab, weights=weights, adapters=adapters)
    return ckpt, curve
