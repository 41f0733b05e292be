"""TREC-style evaluation: qrels/run files, MRR@k, Recall@k, nDCG@k.

File formats: qrels lines are `qid 0 docid rel` (whitespace-separated,
nonnegative integer grades); run lines are `qid Q0 docid rank score tag`
with contiguous ranks from 1 and non-increasing scores. Binary metrics
treat grade >= rel_threshold as relevant (threshold 1 for dev-style
judgments, 2 is conventional for densely graded collections); nDCG always
uses the raw grades.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ContractError, DataError

Qrels = dict[str, dict[str, int]]


@dataclass
class Run:
    """Ranked results per query, in rank order, plus the run tag."""

    entries: dict[str, list[tuple[str, float]]]
    tag: str = "marrow"


def load_qrels(path) -> Qrels:
    qrels: Qrels = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'qid 0 docid rel', got {len(parts)} fields")
            qid, _, docid, rel = parts
            try:
                grade = int(rel)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: relevance grade {rel!r} is not an integer") from exc
            if grade < 0:
                raise DataError(f"{path}:{lineno}: negative relevance grade {grade}")
            bucket = qrels.setdefault(qid, {})
            if docid in bucket:
                raise DataError(f"{path}:{lineno}: duplicate qrels entry for ({qid}, {docid})")
            bucket[docid] = grade
    if not qrels:
        raise DataError(f"{path}: empty qrels file")
    return qrels


def load_run(path) -> Run:
    entries: dict[str, list[tuple[str, float]]] = {}
    seen: dict[str, set[str]] = {}
    tag = "marrow"
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag', "
                                f"got {len(parts)} fields")
            qid, _, docid, rank_s, score_s, tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad rank/score field") from exc
            bucket = entries.setdefault(qid, [])
            if rank != len(bucket) + 1:
                raise DataError(f"{path}:{lineno}: rank {rank} breaks the contiguous 1..n order "
                                f"for query {qid}")
            docs = seen.setdefault(qid, set())
            if docid in docs:
                raise DataError(f"{path}:{lineno}: duplicate document {docid} for query {qid}")
            if bucket and score > bucket[-1][1]:
                raise DataError(f"{path}:{lineno}: score increases with rank for query {qid}")
            docs.add(docid)
            bucket.append((docid, score))
    if not entries:
        raise DataError(f"{path}: empty run file")
    return Run(entries=entries, tag=tag)


def monotone_scores(ranked: list[tuple[str, float]]) -> list[tuple[str, float]]:
    """Cascade-min the scores so they are non-increasing in rank order.

    Used when a reranked head block (logits) is followed by a retained tail
    (retriever scores) whose values may exceed the head's minimum.
    """
    out: list[tuple[str, float]] = []
    prev = math.inf
    for doc_id, score in ranked:
        score = min(prev, score)
        out.append((doc_id, score))
        prev = score
    return out


def write_run(path, run: Run) -> None:
    """Emit TREC format with 6-decimal scores; validates run invariants."""
    lines = []
    for qid in sorted(run.entries):
        ranked = run.entries[qid]
        docs = {d for d, _ in ranked}
        if len(docs) != len(ranked):
            raise ContractError(f"query {qid}: duplicate documents in run")
        prev = math.inf
        for i, (doc_id, score) in enumerate(ranked):
            if score > prev:
                raise ContractError(f"query {qid}: scores increase at rank {i + 1}")
            prev = score
            lines.append(f"{qid} Q0 {doc_id} {i + 1} {score:.6f} {run.tag}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(lines)


@dataclass
class MetricResult:
    value: float
    per_query: dict[str, float]
    n_excluded: int = 0


def _relevant_queries(qrels: Qrels, rel_threshold: int) -> list[str]:
    return [q for q, docs in qrels.items()
            if any(g >= rel_threshold for g in docs.values())]


def mrr_at_k(run: Run, qrels: Qrels, k: int, rel_threshold: int = 1) -> MetricResult:
    """Mean reciprocal rank of the first relevant document within top k.

    Averaged over every qrels query that has at least one relevant
    document; queries absent from the run contribute 0.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    qids = _relevant_queries(qrels, rel_threshold)
    per_query: dict[str, float] = {}
    for qid in qids:
        rr = 0.0
        for i, (doc_id, _) in enumerate(run.entries.get(qid, [])[:k]):
            if qrels[qid].get(doc_id, 0) >= rel_threshold:
                rr = 1.0 / (i + 1)
                break
        per_query[qid] = rr
    value = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(value, per_query, n_excluded=len(qrels) - len(qids))


def recall_at_k(run: Run, qrels: Qrels, k: int, rel_threshold: int = 1) -> MetricResult:
    """|relevant in top k| / |relevant|; zero-relevant queries are excluded."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    per_query: dict[str, float] = {}
    for qid in _relevant_queries(qrels, rel_threshold):
        relevant = {d for d, g in qrels[qid].items() if g >= rel_threshold}
        top = {d for d, _ in run.entries.get(qid, [])[:k]}
        per_query[qid] = len(relevant & top) / len(relevant)
    value = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(value, per_query, n_excluded=len(qrels) - len(per_query))


def _gain_fn(gain: str):
    if gain == "linear":
        return float
    if gain == "exponential":
        return lambda rel: float(2 ** rel - 1)
    raise ContractError(f"gain mode must be 'linear' or 'exponential', got {gain!r}")


def ndcg_at_k(run: Run, qrels: Qrels, k: int, gain: str = "linear") -> MetricResult:
    """DCG with log2(rank+1) discounts, normalized by the ideal ordering."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    g = _gain_fn(gain)
    per_query: dict[str, float] = {}
    n_excluded = 0
    for qid, judged in qrels.items():
        ideal = sorted(judged.values(), reverse=True)[:k]
        idcg = sum(g(rel) / math.log2(i + 2) for i, rel in enumerate(ideal))
        if idcg == 0.0:
            n_excluded += 1
            continue
        dcg = sum(g(judged.get(doc_id, 0)) / math.log2(i + 2)
                  for i, (doc_id, _) in enumerate(run.entries.get(qid, [])[:k]))
        per_query[qid] = dcg / idcg
    value = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(value, per_query, n_excluded=n_excluded)


def parse_metric(spec: str) -> tuple[str, int]:
    """'mrr@10' -> ('mrr', 10); accepted names: mrr, recall, ndcg."""
    try:
        name, at = spec.strip().lower().split("@")
        k = int(at)
    except ValueError as exc:
        raise ContractError(f"bad metric spec {spec!r}; expected name@k") from exc
    if name not in ("mrr", "recall", "ndcg") or k < 1:
        raise ContractError(f"bad metric spec {spec!r}")
    return name, k


@dataclass
class MetricReport:
    """Aggregate metric values plus the per-query table behind them."""

    run_tag: str
    aggregates: dict[str, float]
    per_query: dict[str, dict[str, float | None]]
    excluded: dict[str, int]
    n_queries: int

    def per_query_tsv(self) -> str:
        metrics = list(self.aggregates)
        lines = ["query_id\t" + "\t".join(metrics) + "\n"]
        for qid in sorted(self.per_query):
            cells = [qid]
            for m in metrics:
                v = self.per_query[qid].get(m)
                cells.append("NA" if v is None else f"{v:.6f}")
            lines.append("\t".join(cells) + "\n")
        return "".join(lines)


def evaluate_run(run: Run, qrels: Qrels, metric_specs: list[str],
                 rel_threshold: int = 1, gain: str = "linear") -> MetricReport:
    """Evaluate one run against qrels for every requested metric.

    Disjoint query-id sets between run and qrels almost always mean the
    wrong file was passed, so that is a hard error rather than a zero.
    """
    if not metric_specs:
        raise ContractError("no metrics requested")
    if not set(run.entries) & set(qrels):
        raise DataError("run and qrels share no query ids; likely a file mix-up")
    aggregates: dict[str, float] = {}
    per_query: dict[str, dict[str, float | None]] = {q: {} for q in qrels}
    excluded: dict[str, int] = {}
    for spec in metric_specs:
        name, k = parse_metric(spec)
        key = f"{name}@{k}"
        if name == "mrr":
            res = mrr_at_k(run, qrels, k, rel_threshold)
        elif name == "recall":
            res = recall_at_k(run, qrels, k, rel_threshold)
        else:
            res = ndcg_at_k(run, qrels, k, gain)
        aggregates[key] = res.value
        excluded[key] = res.n_excluded
        for qid in qrels:
            per_query[qid][key] = res.per_query.get(qid)
    return MetricReport(run_tag=run.tag, aggregates=aggregates, per_query=per_query,
                        excluded=excluded, n_queries=len(qrels))
