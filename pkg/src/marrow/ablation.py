"""Ablation runners: full fine-tuning vs low-rank adapters, and the
train-length x eval-length grid for the reranker."""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Mapping, Sequence

import numpy as np

from . import flatindex
from .config import PipelineConfig
from .errors import ConfigError
from .evaluation import Run, evaluate_run, load_qrels, load_run, monotone_scores
from .model import encode_text, trainable_tensors
from .parallel import ordered_map
from .pipeline import (A_DATASET, A_RETRIEVER, _doc_token_budget, _load_store, _load_vocab,
                       _path, _qrels_file, _queries_file, _require, _write_manifest)
from .reranker import rerank, train_reranker
from .retriever import load_dataset, train_retriever, write_loss_curve
from .text import read_queries, tokenize


def _first_mrr_metric(cfg: PipelineConfig) -> str:
    for spec in cfg.metric_list():
        if spec.startswith("mrr@"):
            return spec
    return "mrr@10"


def _encode_store_index(ckpt, store: Mapping[str, str], budget: int) -> flatindex.FlatIndex:
    items = list(store.items())

    def encode_one(item):
        tokens = tokenize(item[1], ckpt.vocab, budget)
        return encode_text(tokens, ckpt.weights, ckpt.adapters).data[0]

    vectors = ordered_map(encode_one, items)
    return flatindex.FlatIndex([i for i, _ in items], np.ascontiguousarray(np.stack(vectors)))


def _dense_run(ckpt, index: flatindex.FlatIndex, queries: Sequence[tuple[str, str]],
               q_budget: int, depth: int, tag: str) -> Run:
    def embed(item):
        tokens = tokenize(item[1], ckpt.vocab, q_budget)
        return encode_text(tokens, ckpt.weights, ckpt.adapters).data[0]

    vectors = ordered_map(embed, queries)
    results = flatindex.batch_search(vectors, index, depth)
    return Run(entries={qid: res for (qid, _), res in zip(queries, results)}, tag=tag)


def _loss_endpoints(curve: list[tuple[int, float]]) -> tuple[float, float]:
    """(first-step loss, mean of the last up-to-10 steps)."""
    values = [v for _, v in curve]
    tail = values[-min(10, len(values)):]
    return values[0], sum(tail) / len(tail)


def run_ablation_lora(cfg: PipelineConfig, dataset: str = A_DATASET) -> dict[str, str]:
    """Train full-FT and adapter variants on identical data and seed.

    Reports the train-split and held-out retrieval metric side by side plus
    trainable-parameter counts and loss-curve endpoints.
    """
    dataset_path = _require(cfg, dataset, "mine")
    store = _load_store(cfg)
    vocab = _load_vocab(cfg)
    train_queries = list(read_queries(_queries_file(cfg, "train")))
    eval_queries = list(read_queries(_queries_file(cfg, "eval")))
    qrels_train = load_qrels(_qrels_file(cfg, "train"))
    qrels_eval = load_qrels(_qrels_file(cfg, "eval"))
    examples = load_dataset(dataset_path)
    metric = _first_mrr_metric(cfg)
    depth = max(int(metric.split("@")[1]), 10)
    budget = _doc_token_budget(cfg)

    rows: dict[str, dict] = {}
    outputs: dict[str, str] = {}
    for label, finetune in (("FT", "full"), ("LoRA", "lora")):
        train_cfg = cfg.train_config("retriever", vocab.size)
        lora_rank = cfg.retriever.lora_rank if cfg.retriever.lora_rank > 0 else 4
        train_cfg = dataclasses.replace(
            train_cfg, finetune=finetune,
            model=dataclasses.replace(train_cfg.model, lora_rank=lora_rank))
        ckpt, curve = train_retriever(train_cfg, examples, store,
                                      dict(train_queries), vocab)
        n_trainable = sum(t.size for t in
                          trainable_tensors(ckpt.weights, ckpt.adapters).values())
        n_full = ckpt.weights.n_parameters()
        loss_initial, loss_final = _loss_endpoints(curve)
        loss_name = f"ablation_lora_{label.lower()}_loss.csv"
        write_loss_curve(_path(cfg, loss_name), curve)
        outputs[loss_name] = _path(cfg, loss_name)

        index = _encode_store_index(ckpt, store, budget)
        cells = {}
        for split, queries, qrels in (("train", train_queries, qrels_train),
                                      ("dev", eval_queries, qrels_eval)):
            run = _dense_run(ckpt, index, queries, cfg.retriever.max_query_tokens,
                             depth, tag=label.lower())
            report = evaluate_run(run, qrels, [metric], rel_threshold=cfg.pipeline.rel_threshold)
            cells[split] = report.aggregates[metric]
        rows[label] = {
            "train": cells["train"],
            "dev": cells["dev"],
            "trainable_parameters": n_trainable,
            "total_parameters": n_full,
            "loss_initial": loss_initial,
            "loss_final": loss_final,
        }

    out_path = _path(cfg, "ablation_lora_report.json")
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"metric": metric, "rows": rows}, f, sort_keys=True, indent=2)
        f.write("\n")
    outputs["ablation_lora_report.json"] = out_path
    _write_manifest(cfg, "ablation-lora", {"dataset": dataset, "metric": metric},
                    {dataset: dataset_path}, {"ablation_lora_report.json": out_path})
    return outputs


def run_ablation_length(cfg: PipelineConfig, train_lengths: Sequence[int],
                        eval_lengths: Sequence[int],
                        dataset: str = "dataset_reranker.jsonl",
                        base_run: str = "run_dense_eval.trec") -> dict[str, str]:
    """Train one reranker per input-length budget, evaluate each at every
    inference budget, and emit the metric grid (CSV plus long-form TSV)."""
    if not train_lengths or not eval_lengths:
        raise ConfigError("ablation-length needs nonempty train and eval length lists")
    cap = cfg.reranker.max_seq_len
    for n in list(train_lengths) + list(eval_lengths):
        if not (8 <= n <= cap):
            raise ConfigError(f"length {n} outside [8, reranker.max_seq_len={cap}]")

    dataset_path = _require(cfg, dataset, "mine")
    run_path = _require(cfg, base_run, "retrieve")
    store = _load_store(cfg)
    vocab = _load_vocab(cfg)
    train_queries = dict(read_queries(_queries_file(cfg, "train")))
    eval_queries = dict(read_queries(_queries_file(cfg, "eval")))
    qrels_eval = load_qrels(_qrels_file(cfg, "eval"))
    base = load_run(run_path)
    examples = load_dataset(dataset_path)
    metric = _first_mrr_metric(cfg)
    k = cfg.rerank_depth

    grid: dict[int, dict[int, float]] = {}
    outputs: dict[str, str] = {}
    for lt in train_lengths:
        train_cfg = dataclasses.replace(cfg.train_config("reranker", vocab.size),
                                        max_pair_tokens=int(lt))
        ckpt, curve = train_reranker(train_cfg, examples, store, train_queries, vocab)
        loss_name = f"ablation_len_{lt}_loss.csv"
        write_loss_curve(_path(cfg, loss_name), curve)
        outputs[loss_name] = _path(cfg, loss_name)
        grid[lt] = {}
        for le in eval_lengths:
            entries = {}
            for qid in sorted(base.entries):
                ranked = rerank(eval_queries[qid], base.entries[qid], k, ckpt, store,
                                keep_tail=cfg.pipeline.keep_tail, max_len=int(le))
                entries[qid] = monotone_scores(ranked)
            report = evaluate_run(Run(entries=entries, tag=f"len{lt}"), qrels_eval,
                                  [metric], rel_threshold=cfg.pipeline.rel_threshold)
            grid[lt][le] = report.aggregates[metric]

    grid_path = _path(cfg, "ablation_length_grid.csv")
    with open(grid_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("train_len," + ",".join(str(le) for le in eval_lengths) + "\n")
        for lt in train_lengths:
            f.write(str(lt) + "," + ",".join(f"{grid[lt][le]:.6f}" for le in eval_lengths) + "\n")
    long_path = _path(cfg, "ablation_length_long.tsv")
    with open(long_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"train_len\teval_len\t{metric}\n")
        for lt in train_lengths:
            for le in eval_lengths:
                f.write(f"{lt}\t{le}\t{grid[lt][le]:.6f}\n")
    # informational only: is the diagonal non-decreasing in length?
    diag = [grid[lt][le] for lt, le in zip(train_lengths, eval_lengths)
            if lt in grid and le in grid[lt]]
    trend = all(b >= a - 1e-12 for a, b in zip(diag, diag[1:])) if len(diag) > 1 else None
    report_path = _path(cfg, "ablation_length_report.json")
    with open(report_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"metric": metric,
                   "train_lengths": [int(x) for x in train_lengths],
                   "eval_lengths": [int(x) for x in eval_lengths],
                   "grid": {str(lt): {str(le): grid[lt][le] for le in eval_lengths}
                            for lt in train_lengths},
                   "diagonal_non_decreasing": trend},
                  f, sort_keys=True, indent=2)
        f.write("\n")
    outputs["ablation_length_grid.csv"] = grid_path
    outputs["ablation_length_long.tsv"] = long_path
    outputs["ablation_length_report.json"] = report_path
    _write_manifest(cfg, "ablation-length",
                    {"train_lengths": list(map(int, train_lengths)),
                     "eval_lengths": list(map(int, eval_lengths)),
                     "dataset": dataset, "base_run": base_run},
                    {dataset: dataset_path, base_run: run_path},
                    {"ablation_length_report.json": report_path,
                     "ablation_length_grid.csv": grid_path,
                     "ablation_length_long.tsv": long_path})
    return outputs
