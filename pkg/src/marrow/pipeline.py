"""Multi-stage pipeline orchestration over a working directory.

Stages read and write named artifacts in the workdir; each artifact gets a
manifest recording the stage, its parameters, content hashes of every input
and output, and the full config snapshot, so identical config + seed +
inputs reproduce identical bytes. Missing upstream artifacts raise
DependencyError naming the stage that produces them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from typing import Mapping, Sequence

import numpy as np

from . import flatindex, lexical
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .errors import ConfigError, ContractError, DataError, DependencyError
from .evaluation import (MetricReport, Qrels, Run, evaluate_run, load_qrels, load_run,
                         monotone_scores, write_run)
from .model import encode_text, merge_lora, trainable_tensors
from .parallel import ordered_map
from .reranker import rerank, train_reranker
from .retriever import (examples_to_rows, load_dataset, mine_hard_negatives,
                        train_retriever, write_dataset, write_loss_curve)
from .text import TokenSequence, Vocabulary, build_vocab, read_corpus, read_queries, segment_maxp, split_words, tokenize

logger = logging.getLogger(__name__)

A_STORE = "store.tsv"
A_STORE_STATS = "store_stats.json"
A_VOCAB = "vocab.txt"
A_BM25_INDEX = "bm25.idx"
A_EMBEDDINGS = "embeddings.bin"
A_SEGMAP = "segments.tsv"
A_FLAT_INDEX = "flat.idx"
A_DATASET = "dataset.jsonl"
A_RETRIEVER = "retriever.ckpt"
A_RERANKER = "reranker.ckpt"

_PRODUCERS = {
    A_STORE: "ingest",
    A_STORE_STATS: "ingest",
    A_VOCAB: "build-vocab",
    A_BM25_INDEX: "index --kind bm25",
    A_EMBEDDINGS: "encode",
    A_SEGMAP: "encode",
    A_FLAT_INDEX: "index --kind dense",
    A_DATASET: "mine",
    A_RETRIEVER: "train-retriever",
    A_RERANKER: "train-reranker",
}


def _path(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.paths.workdir, name)


def _require(cfg: PipelineConfig, name: str, producer: str | None = None) -> str:
    path = _path(cfg, name)
    if not os.path.exists(path):
        stage = producer or _PRODUCERS.get(name, "an earlier stage")
        raise DependencyError(f"missing artifact {name!r}; run '{stage}' first")
    return path


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(cfg: PipelineConfig, stage: str, params: Mapping,
                    inputs: Mapping[str, str], outputs: Mapping[str, str]) -> None:
    primary = next(iter(outputs))
    manifest = {
        "stage": stage,
        "params": dict(sorted(params.items())),
        "inputs": {name: _sha256(path) for name, path in sorted(inputs.items())},
        "outputs": {name: _sha256(path) for name, path in sorted(outputs.items())},
        "config": cfg.snapshot(),
    }
    path = _path(cfg, primary + ".manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def _load_store(cfg: PipelineConfig) -> dict[str, str]:
    path = _require(cfg, A_STORE)
    store: dict[str, str] = {}
    for doc_id, text in read_corpus(path, "tsv"):
        store[doc_id] = text
    return store


def _load_vocab(cfg: PipelineConfig) -> Vocabulary:
    return Vocabulary.load(_require(cfg, A_VOCAB))


def _queries_file(cfg: PipelineConfig, split: str) -> str:
    path = cfg.paths.queries_train if split == "train" else cfg.paths.queries_eval
    if not path:
        raise ConfigError(f"paths.queries_{split} is not set")
    if not os.path.exists(path):
        raise DataError(f"queries file not found: {path}")
    return path


def _qrels_file(cfg: PipelineConfig, split: str) -> str:
    path = cfg.paths.qrels_train if split == "train" else cfg.paths.qrels_eval
    if not path:
        raise ConfigError(f"paths.qrels_{split} is not set")
    if not os.path.exists(path):
        raise DataError(f"qrels file not found: {path}")
    return path


def _quantile(sorted_values: Sequence[int], q: float) -> int:
    n = len(sorted_values)
    idx = min(n - 1, max(0, int(np.ceil(q * n)) - 1))
    return int(sorted_values[idx])


# --- stages ---


def stage_ingest(cfg: PipelineConfig) -> dict[str, str]:
    """Canonicalize the corpus into an id-addressable TSV store plus a
    token-length profile (histogram and percentiles)."""
    if not cfg.paths.corpus:
        raise ConfigError("paths.corpus is not set")
    if not os.path.exists(cfg.paths.corpus):
        raise DataError(f"corpus file not found: {cfg.paths.corpus}")
    os.makedirs(cfg.paths.workdir, exist_ok=True)
    store_path = _path(cfg, A_STORE)
    stats_path = _path(cfg, A_STORE_STATS)
    lengths: list[int] = []
    seen: set[str] = set()
    n_docs = 0
    with open(store_path, "w", encoding="utf-8", newline="\n") as out:
        for lineno, (doc_id, text) in enumerate(
                read_corpus(cfg.paths.corpus, cfg.paths.corpus_format), start=1):
            if doc_id in seen:
                raise DataError(f"{cfg.paths.corpus}:{lineno}: duplicate doc_id {doc_id}")
            seen.add(doc_id)
            clean = " ".join(text.split())  # tabs/newlines would break the TSV store
            out.write(f"{doc_id}\t{clean}\n")
            lengths.append(len(split_words(clean)))
            n_docs += 1
    if n_docs == 0:
        raise DataError(f"{cfg.paths.corpus}: no documents")
    lengths.sort()
    hist_edges = [0, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096]
    hist = {str(edge): 0 for edge in hist_edges}
    for n in lengths:
        for edge in reversed(hist_edges):
            if n >= edge:
                hist[str(edge)] += 1
                break
    stats = {
        "n_docs": n_docs,
        "token_length": {
            "mean": sum(lengths) / n_docs,
            "p50": _quantile(lengths, 0.5),
            "p90": _quantile(lengths, 0.9),
            "max": int(lengths[-1]),
        },
        "histogram_lower_edges": hist,
    }
    with open(stats_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(stats, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(cfg, "ingest", {}, {"corpus": cfg.paths.corpus},
                    {A_STORE: store_path, A_STORE_STATS: stats_path})
    return {A_STORE: store_path, A_STORE_STATS: stats_path}


def stage_build_vocab(cfg: PipelineConfig) -> dict[str, str]:
    """Vocabulary over the store plus any query files, so query-side words
    (and the pair-template markers) always have ids."""
    store_path = _require(cfg, A_STORE)

    def stream():
        for _, text in read_corpus(store_path, "tsv"):
            yield text
        for split in ("train", "eval"):
            path = cfg.paths.queries_train if split == "train" else cfg.paths.queries_eval
            if path and os.path.exists(path):
                for _, text in read_queries(path):
                    yield text
        yield "query document"

    vocab = build_vocab(stream(), cfg.tokenizer.vocab_cap)
    out = _path(cfg, A_VOCAB)
    vocab.save(out)
    inputs = {A_STORE: store_path}
    _write_manifest(cfg, "build-vocab", {"cap": cfg.tokenizer.vocab_cap}, inputs, {A_VOCAB: out})
    return {A_VOCAB: out}


def stage_index(cfg: PipelineConfig, kind: str = "bm25",
                embeddings: str = A_EMBEDDINGS, out: str | None = None) -> dict[str, str]:
    if kind == "bm25":
        store_path = _require(cfg, A_STORE)
        vocab = _load_vocab(cfg)
        index = lexical.build_inverted_index(read_corpus(store_path, "tsv"), vocab)
        out = out or A_BM25_INDEX
        out_path = _path(cfg, out)
        lexical.save_inverted_index(out_path, index)
        _write_manifest(cfg, "index", {"kind": kind},
                        {A_STORE: store_path, A_VOCAB: _path(cfg, A_VOCAB)},
                        {out: out_path})
        return {out: out_path}
    if kind == "dense":
        emb_path = _require(cfg, embeddings, "encode")
        index = flatindex.load_flat_index(emb_path, validate_norms=True)
        out = out or A_FLAT_INDEX
        out_path = _path(cfg, out)
        flatindex.save_flat_index(out_path, index)
        _write_manifest(cfg, "index", {"kind": kind, "embeddings": embeddings},
                        {embeddings: emb_path}, {out: out_path})
        return {out: out_path}
    raise ConfigError(f"index kind must be 'bm25' or 'dense', got {kind!r}")


def _doc_token_budget(cfg: PipelineConfig) -> int:
    cap = cfg.retriever.max_seq_len - 1  # room for the appended eos
    if cfg.pipeline.mode == "document":
        return cap
    return min(cfg.retriever.max_doc_tokens, cap)


def stage_encode(cfg: PipelineConfig, ckpt: str = A_RETRIEVER,
                 out: str = A_EMBEDDINGS, strategy: str | None = None) -> dict[str, str]:
    """Encode the corpus into unit vectors (whole-truncate or MaxP segments)."""
    ckpt_path = _require(cfg, ckpt, "train-retriever")
    store = _load_store(cfg)
    model = load_checkpoint(ckpt_path)
    strategy = strategy or (cfg.pipeline.doc_strategy if cfg.pipeline.mode == "document"
                            else "whole-truncate")

    items: list[tuple[str, TokenSequence]] = []
    segmap: list[tuple[str, str]] = []
    if strategy == "maxp":
        window = cfg.pipeline.maxp_window or (model.config.max_seq_len - 1)
        stride = cfg.pipeline.maxp_stride or max(1, window // 2)
        for doc_id, text in store.items():
            full = tokenize(text, model.vocab, 1 << 30)
            # a document that fits the window needs no segmentation, which
            # also makes MaxP coincide with whole-document encoding there
            segs = [full] if len(full.ids) <= window else segment_maxp(full, window, stride)
            for start_idx, seg in enumerate(segs):
                seg_id = f"{doc_id}#{start_idx}"
                items.append((seg_id, seg))
                segmap.append((seg_id, doc_id))
    else:
        budget = _doc_token_budget(cfg)
        for doc_id, text in store.items():
            items.append((doc_id, tokenize(text, model.vocab, budget)))

    def encode_one(item):
        _, tokens = item
        return encode_text(tokens, model.weights, model.adapters).data[0]

    vectors = ordered_map(encode_one, items)
    index = flatindex.FlatIndex([i for i, _ in items],
                                np.ascontiguousarray(np.stack(vectors)))
    out_path = _path(cfg, out)
    flatindex.save_flat_index(out_path, index)
    outputs = {out: out_path}
    if strategy == "maxp":
        seg_path = _path(cfg, A_SEGMAP)
        with open(seg_path, "w", encoding="utf-8", newline="\n") as f:
            for seg_id, doc_id in segmap:
                f.write(f"{seg_id}\t{doc_id}\n")
        outputs[A_SEGMAP] = seg_path
    _write_manifest(cfg, "encode", {"ckpt": ckpt, "strategy": strategy},
                    {ckpt: ckpt_path, A_STORE: _path(cfg, A_STORE)}, outputs)
    return outputs


def _load_segmap(cfg: PipelineConfig) -> dict[str, str]:
    path = _require(cfg, A_SEGMAP, "encode (maxp strategy)")
    seg2doc: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            seg_id, doc_id = line.rstrip("\n").split("\t")
            seg2doc[seg_id] = doc_id
    return seg2doc


def maxp_search(query_vec: np.ndarray, index: flatindex.FlatIndex,
                seg2doc: Mapping[str, str], k: int) -> list[tuple[str, float]]:
    """Document ranking where each document scores as its best segment."""
    ranked_segments = flatindex.flat_search(query_vec, index, max(1, index.n_docs))
    best: dict[str, float] = {}
    for seg_id, score in ranked_segments:
        doc_id = seg2doc[seg_id]
        if doc_id not in best:  # first hit in descending order is the max
            best[doc_id] = score
    ranked = sorted(best.items(), key=lambda e: (-e[1], e[0]))
    return ranked[:k]


def stage_retrieve(cfg: PipelineConfig, source: str = "dense", split: str = "eval",
                   ckpt: str = A_RETRIEVER, out: str | None = None,
                   depth: int | None = None, strategy: str | None = None) -> dict[str, str]:
    depth = depth or cfg.pipeline.retrieve_depth
    if source == "bm25":
        _require(cfg, A_BM25_INDEX)
    elif source == "dense":
        _require(cfg, A_FLAT_INDEX)
        _require(cfg, ckpt, "train-retriever")
    queries_path = _queries_file(cfg, split)
    queries = list(read_queries(queries_path))
    out = out or f"run_{source}_{split}.trec"
    out_path = _path(cfg, out)
    inputs: dict[str, str] = {"queries": queries_path}
    params = {"source": source, "split": split, "depth": depth}

    if source == "bm25":
        index_path = _require(cfg, A_BM25_INDEX)
        index = lexical.load_inverted_index(index_path)
        inputs[A_BM25_INDEX] = index_path
        results = ordered_map(
            lambda q: lexical.bm25_search(q[1], index, depth,
                                          cfg.pipeline.bm25_k1, cfg.pipeline.bm25_b),
            queries)
    elif source == "dense":
        index_path = _require(cfg, A_FLAT_INDEX)
        ckpt_path = _require(cfg, ckpt, "train-retriever")
        index = flatindex.load_flat_index(index_path)
        model = load_checkpoint(ckpt_path)
        inputs[A_FLAT_INDEX] = index_path
        inputs[ckpt] = ckpt_path
        strategy = strategy or (cfg.pipeline.doc_strategy if cfg.pipeline.mode == "document"
                                else "whole-truncate")
        q_budget = cfg.retriever.max_query_tokens

        def embed_query(item):
            _, text = item
            tokens = tokenize(text, model.vocab, q_budget)
            return encode_text(tokens, model.weights, model.adapters).data[0]

        vectors = ordered_map(embed_query, queries)
        if strategy == "maxp":
            seg2doc = _load_segmap(cfg)
            params["strategy"] = "maxp"
            results = ordered_map(lambda v: maxp_search(v, index, seg2doc, depth), vectors)
        else:
            results = flatindex.batch_search(vectors, index, depth)
    else:
        raise ConfigError(f"retrieve source must be 'bm25' or 'dense', got {source!r}")

    run = Run(entries={qid: res for (qid, _), res in zip(queries, results)}, tag=source)
    write_run(out_path, run)
    _write_manifest(cfg, "retrieve", params, inputs, {out: out_path})
    return {out: out_path}


def stage_mine(cfg: PipelineConfig, sources: Sequence[str] | None = None,
               depth: int | None = None, m: int | None = None,
               blend: Sequence[float] | None = None, split: str = "train",
               out: str = A_DATASET) -> dict[str, str]:
    """Build a hard-negative training dataset from one or more runs."""
    names = list(sources) if sources else [s.strip() for s in cfg.mining.sources.split(",") if s.strip()]
    if not names:
        raise ConfigError("mining.sources is empty")
    depth = depth or cfg.mining.depth
    m = m or cfg.mining.negatives
    if blend is None and cfg.mining.blend.strip():
        blend = [float(x) for x in cfg.mining.blend.split(",")]
    if blend is not None and len(blend) != len(names):
        raise ConfigError(f"blend has {len(blend)} weights for {len(names)} sources")

    runs = {}
    inputs = {}
    for name in names:
        path = _require(cfg, name, "retrieve")
        runs[name] = load_run(path)
        inputs[name] = path
    qrels_path = _qrels_file(cfg, split)
    qrels = load_qrels(qrels_path)
    inputs["qrels"] = qrels_path
    blend_map = dict(zip(names, blend)) if blend is not None else None
    examples, stats = mine_hard_negatives(runs, qrels, depth, m, blend_map,
                                          seed=cfg.mining.seed,
                                          rel_threshold=cfg.pipeline.rel_threshold)
    if not examples:
        raise DataError("mining produced no training examples")
    out_path = _path(cfg, out)
    write_dataset(out_path, examples_to_rows(examples, qrels))
    stats_path = _path(cfg, out + ".stats.json")
    with open(stats_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"queries_total": stats.queries_total,
                   "queries_mined": stats.queries_mined,
                   "queries_skipped_no_positive": stats.queries_skipped_no_positive,
                   "queries_skipped_no_candidates": stats.queries_skipped_no_candidates,
                   "picks_per_source": dict(sorted(stats.picks_per_source.items()))},
                  f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(cfg, "mine",
                    {"sources": names, "depth": depth, "m": m,
                     "blend": list(blend) if blend is not None else None, "split": split},
                    inputs, {out: out_path, out + ".stats.json": stats_path})
    return {out: out_path}


def _loss_name(ckpt_name: str) -> str:
    stem = ckpt_name[:-5] if ckpt_name.endswith(".ckpt") else ckpt_name
    return f"{stem}_loss.csv"


def stage_train_retriever(cfg: PipelineConfig, dataset: str = A_DATASET,
                          out: str = A_RETRIEVER) -> dict[str, str]:
    dataset_path = _require(cfg, dataset, "mine")
    store = _load_store(cfg)
    vocab = _load_vocab(cfg)
    queries = dict(read_queries(_queries_file(cfg, "train")))
    examples = load_dataset(dataset_path)
    train_cfg = cfg.train_config("retriever", vocab.size)
    ckpt, curve = train_retriever(train_cfg, examples, store, queries, vocab)
    out_path = _path(cfg, out)
    save_checkpoint(out_path, ckpt)
    loss_path = _path(cfg, _loss_name(out))
    write_loss_curve(loss_path, curve)
    _write_manifest(cfg, "train-retriever", {"dataset": dataset},
                    {dataset: dataset_path, A_VOCAB: _path(cfg, A_VOCAB)},
                    {out: out_path, _loss_name(out): loss_path})
    return {out: out_path, _loss_name(out): loss_path}


def stage_train_reranker(cfg: PipelineConfig, dataset: str = "dataset_reranker.jsonl",
                         out: str = A_RERANKER) -> dict[str, str]:
    dataset_path = _require(cfg, dataset, "mine")
    store = _load_store(cfg)
    vocab = _load_vocab(cfg)
    queries = dict(read_queries(_queries_file(cfg, "train")))
    examples = load_dataset(dataset_path)
    train_cfg = cfg.train_config("reranker", vocab.size)
    ckpt, curve = train_reranker(train_cfg, examples, store, queries, vocab)
    out_path = _path(cfg, out)
    save_checkpoint(out_path, ckpt)
    loss_path = _path(cfg, _loss_name(out))
    write_loss_curve(loss_path, curve)
    _write_manifest(cfg, "train-reranker", {"dataset": dataset},
                    {dataset: dataset_path, A_VOCAB: _path(cfg, A_VOCAB)},
                    {out: out_path, _loss_name(out): loss_path})
    return {out: out_path, _loss_name(out): loss_path}


def stage_rerank(cfg: PipelineConfig, run: str = "run_dense_eval.trec",
                 ckpt: str = A_RERANKER, split: str = "eval",
                 out: str = "run_rerank_eval.trec", k: int | None = None,
                 max_len: int | None = None) -> dict[str, str]:
    run_path = _require(cfg, run, "retrieve")
    ckpt_path = _require(cfg, ckpt, "train-reranker")
    store = _load_store(cfg)
    model = load_checkpoint(ckpt_path)
    queries = dict(read_queries(_queries_file(cfg, split)))
    base = load_run(run_path)
    k = k or cfg.rerank_depth
    entries: dict[str, list[tuple[str, float]]] = {}
    for qid in sorted(base.entries):
        if qid not in queries:
            raise DataError(f"run query {qid} missing from the {split} query file")
        ranked = rerank(queries[qid], base.entries[qid], k, model, store,
                        keep_tail=cfg.pipeline.keep_tail, max_len=max_len)
        entries[qid] = monotone_scores(ranked)
    out_path = _path(cfg, out)
    write_run(out_path, Run(entries=entries, tag="rerank"))
    _write_manifest(cfg, "rerank", {"run": run, "ckpt": ckpt, "k": k, "max_len": max_len},
                    {run: run_path, ckpt: ckpt_path}, {out: out_path})
    return {out: out_path}


def stage_eval(cfg: PipelineConfig, runs: Sequence[str] = ("run_dense_eval.trec",),
               split: str = "eval", out: str = "report.json") -> dict[str, str]:
    qrels_path = _qrels_file(cfg, split)
    qrels = load_qrels(qrels_path)
    metrics = cfg.metric_list()
    report: dict[str, dict] = {}
    inputs = {"qrels": qrels_path}
    outputs: dict[str, str] = {}
    out_path = _path(cfg, out)
    outputs[out] = out_path
    per_query_paths = []
    for name in runs:
        run_path = _require(cfg, name, "retrieve or rerank")
        inputs[name] = run_path
        result = evaluate_run(load_run(run_path), qrels, metrics,
                              rel_threshold=cfg.pipeline.rel_threshold)
        report[name] = {"tag": result.run_tag, "aggregates": result.aggregates,
                        "excluded": result.excluded, "n_queries": result.n_queries}
        stem = name[:-5] if name.endswith(".trec") else name
        pq_name = f"{stem}_per_query.tsv"
        pq_path = _path(cfg, pq_name)
        with open(pq_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(result.per_query_tsv())
        outputs[pq_name] = pq_path
        per_query_paths.append(pq_path)
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"metrics": metrics, "rel_threshold": cfg.pipeline.rel_threshold,
                   "runs": report}, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(cfg, "eval", {"runs": list(runs), "split": split}, inputs, outputs)
    return outputs


STAGES = {
    "ingest": stage_ingest,
    "build-vocab": stage_build_vocab,
    "index": stage_index,
    "train-retriever": stage_train_retriever,
    "encode": stage_encode,
    "retrieve": stage_retrieve,
    "mine": stage_mine,
    "train-reranker": stage_train_reranker,
    "rerank": stage_rerank,
    "eval": stage_eval,
}


def run_stage(cfg: PipelineConfig, stage: str, **params) -> dict[str, str]:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}")
    return STAGES[stage](cfg, **params)


# --- composite flows ---


def run_all(cfg: PipelineConfig) -> dict[str, str]:
    """The full retrieve-then-rerank protocol on one corpus.

    BM25 supplies the first negatives; each retriever round then adds its
    own dense negatives to the blend, mirroring the sparse+dense mix. The
    reranker trains on the final retriever's top candidates and reorders
    its eval run. Emits a combined report over BM25, dense and reranked runs.
    """
    stage_ingest(cfg)
    stage_build_vocab(cfg)
    stage_index(cfg, kind="bm25")
    stage_retrieve(cfg, source="bm25", split="train", depth=max(cfg.mining.depth, 10))
    stage_retrieve(cfg, source="bm25", split="eval", out="run_bm25_eval.trec")

    rounds = max(1, cfg.pipeline.retriever_rounds)
    m_retr = max(cfg.mining.negatives, cfg.retriever.negatives_per_query)
    sources = ["run_bm25_train.trec"]
    blend = None
    ckpt_name = A_RETRIEVER
    for r in range(rounds):
        last = r == rounds - 1
        dataset = A_DATASET if last else f"dataset_r{r + 1}.jsonl"
        ckpt_name = A_RETRIEVER if last else f"retriever_r{r + 1}.ckpt"
        stage_mine(cfg, sources=sources, m=m_retr, blend=blend, out=dataset)
        stage_train_retriever(cfg, dataset=dataset, out=ckpt_name)
        emb = A_EMBEDDINGS if last else f"embeddings_r{r + 1}.bin"
        idx = A_FLAT_INDEX if last else f"flat_r{r + 1}.idx"
        stage_encode(cfg, ckpt=ckpt_name, out=emb)
        stage_index(cfg, kind="dense", embeddings=emb, out=idx)
        if not last:
            # expose this round's dense view as a mining source for the next
            run_name = f"run_dense_r{r + 1}_train.trec"
            _retrieve_with_index(cfg, idx, ckpt_name, "train", run_name,
                                 depth=max(cfg.mining.depth, 10))
            sources = ["run_bm25_train.trec", run_name]
            blend = [0.5, 0.5]

    stage_retrieve(cfg, source="dense", split="eval", ckpt=ckpt_name)
    stage_retrieve(cfg, source="dense", split="train", ckpt=ckpt_name,
                   depth=max(cfg.rerank_depth, cfg.reranker.negatives_per_query + 1))
    m_rr = max(cfg.mining.negatives, cfg.reranker.negatives_per_query)
    stage_mine(cfg, sources=["run_dense_train.trec"], depth=cfg.rerank_depth,
               m=m_rr, out="dataset_reranker.jsonl")
    stage_train_reranker(cfg, dataset="dataset_reranker.jsonl")
    stage_rerank(cfg, run="run_dense_eval.trec")
    return stage_eval(cfg, runs=["run_bm25_eval.trec", "run_dense_eval.trec",
                                 "run_rerank_eval.trec"])


def _retrieve_with_index(cfg: PipelineConfig, index_name: str, ckpt: str,
                         split: str, out: str, depth: int) -> dict[str, str]:
    """stage_retrieve against a non-default flat index artifact."""
    index_path = _require(cfg, index_name, "index --kind dense")
    ckpt_path = _require(cfg, ckpt, "train-retriever")
    index = flatindex.load_flat_index(index_path)
    model = load_checkpoint(ckpt_path)
    queries = list(read_queries(_queries_file(cfg, split)))

    def embed_query(item):
        tokens = tokenize(item[1], model.vocab, cfg.retriever.max_query_tokens)
        return encode_text(tokens, model.weights, model.adapters).data[0]

    vectors = ordered_map(embed_query, queries)
    results = flatindex.batch_search(vectors, index, depth)
    run = Run(entries={qid: res for (qid, _), res in zip(queries, results)}, tag="dense")
    out_path = _path(cfg, out)
    write_run(out_path, run)
    _write_manifest(cfg, "retrieve",
                    {"source": "dense", "split": split, "depth": depth, "index": index_name},
                    {index_name: index_path, ckpt: ckpt_path}, {out: out_path})
    return {out: out_path}


def run_document_compare(cfg: PipelineConfig) -> dict[str, str]:
    """Whole-truncate vs MaxP retrieval, evaluated side by side."""
    if cfg.pipeline.mode != "document":
        raise ConfigError("doc-compare needs pipeline.mode = document")
    _require(cfg, A_RETRIEVER, "train-retriever")
    stage_encode(cfg, out="embeddings_whole.bin", strategy="whole-truncate")
    stage_index(cfg, kind="dense", embeddings="embeddings_whole.bin", out="flat_whole.idx")
    _retrieve_with_flat(cfg, "flat_whole.idx", "run_doc_whole.trec", strategy="whole-truncate")
    stage_encode(cfg, out="embeddings_maxp.bin", strategy="maxp")
    stage_index(cfg, kind="dense", embeddings="embeddings_maxp.bin", out="flat_maxp.idx")
    _retrieve_with_flat(cfg, "flat_maxp.idx", "run_doc_maxp.trec", strategy="maxp")

    qrels = load_qrels(_qrels_file(cfg, "eval"))
    metrics = cfg.metric_list()
    rows = {}
    for label, name in (("whole-truncate", "run_doc_whole.trec"), ("maxp", "run_doc_maxp.trec")):
        result = evaluate_run(load_run(_path(cfg, name)), qrels, metrics,
                              rel_threshold=cfg.pipeline.rel_threshold)
        rows[label] = result.aggregates
    out_path = _path(cfg, "doc_compare_report.json")
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"metrics": metrics, "strategies": rows}, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(cfg, "doc-compare", {},
                    {"run_doc_whole.trec": _path(cfg, "run_doc_whole.trec"),
                     "run_doc_maxp.trec": _path(cfg, "run_doc_maxp.trec")},
                    {"doc_compare_report.json": out_path})
    return {"doc_compare_report.json": out_path}


def _retrieve_with_flat(cfg: PipelineConfig, index_name: str, out: str,
                        strategy: str) -> dict[str, str]:
    index_path = _require(cfg, index_name, "index --kind dense")
    model = load_checkpoint(_require(cfg, A_RETRIEVER, "train-retriever"))
    index = flatindex.load_flat_index(index_path)
    queries = list(read_queries(_queries_file(cfg, "eval")))

    def embed_query(item):
        tokens = tokenize(item[1], model.vocab, cfg.retriever.max_query_tokens)
        return encode_text(tokens, model.weights, model.adapters).data[0]

    vectors = ordered_map(embed_query, queries)
    depth = cfg.pipeline.retrieve_depth
    if strategy == "maxp":
        seg2doc = _load_segmap(cfg)
        results = ordered_map(lambda v: maxp_search(v, index, seg2doc, depth), vectors)
    else:
        results = flatindex.batch_search(vectors, index, depth)
    run = Run(entries={qid: res for (qid, _), res in zip(queries, results)}, tag=strategy)
    out_path = _path(cfg, out)
    write_run(out_path, run)
    _write_manifest(cfg, "retrieve", {"source": "dense", "strategy": strategy, "depth": depth},
                    {index_name: index_path}, {out: out_path})
    return {out: out_path}
