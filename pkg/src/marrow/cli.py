"""Command-line entry point.

Usage: marrow <subcommand> --config <path> [--section.key value ...]

Any configuration key can be overridden inline, e.g.
`marrow retrieve --config run.ini --pipeline.retrieve_depth 500`.
Exit codes: 0 success, 2 configuration error, 3 missing stage dependency,
4 malformed data.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .ablation import run_ablation_length, run_ablation_lora
from .config import PipelineConfig, load_config, write_config
from .errors import ConfigError, DataError, DependencyError, MarrowError
from .pipeline import STAGES, run_all, run_document_compare, run_stage
from .synthetic import SyntheticSpec, generate_synthetic

logger = logging.getLogger("marrow")


def _int_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {raw!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marrow",
        description="Desk-scale multi-stage text retrieval pipeline",
        epilog="Unrecognized --section.key VALUE pairs override config entries.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", default=None, help="INI config file")
        return p

    add("ingest", help="canonicalize the corpus into the workdir store")
    add("build-vocab", help="build the token vocabulary")
    p = add("index", help="build the BM25 or dense index")
    p.add_argument("--kind", choices=["bm25", "dense"], default="bm25")
    p.add_argument("--embeddings", default="embeddings.bin")
    p.add_argument("--out", default=None)
    p = add("train-retriever", help="train the bi-encoder")
    p.add_argument("--dataset", default="dataset.jsonl")
    p.add_argument("--out", default="retriever.ckpt")
    p = add("encode", help="encode the corpus with a trained retriever")
    p.add_argument("--ckpt", default="retriever.ckpt")
    p.add_argument("--out", default="embeddings.bin")
    p.add_argument("--strategy", choices=["whole-truncate", "maxp"], default=None)
    p = add("retrieve", help="produce a ranked run")
    p.add_argument("--source", choices=["bm25", "dense"], default="dense")
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p.add_argument("--ckpt", default="retriever.ckpt")
    p.add_argument("--out", default=None)
    p.add_argument("--depth", type=int, default=None)
    p = add("mine", help="mine hard negatives from runs")
    p.add_argument("--sources", default=None, help="comma-separated run artifact names")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--blend", default=None, help="comma weights parallel to sources")
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.add_argument("--out", default="dataset.jsonl")
    p = add("train-reranker", help="train the pointwise reranker")
    p.add_argument("--dataset", default="dataset_reranker.jsonl")
    p.add_argument("--out", default="reranker.ckpt")
    p = add("rerank", help="rerank a run's top candidates")
    p.add_argument("--run", default="run_dense_eval.trec")
    p.add_argument("--ckpt", default="reranker.ckpt")
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p.add_argument("--out", default="run_rerank_eval.trec")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p = add("eval", help="score runs against qrels")
    p.add_argument("--runs", default="run_dense_eval.trec", help="comma-separated run names")
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p.add_argument("--out", default="report.json")
    add("run-all", help="run the full pipeline end to end")
    add("doc-compare", help="whole-document vs MaxP comparison")
    p = add("ablation-lora", help="full fine-tune vs adapters")
    p.add_argument("--dataset", default="dataset.jsonl")
    p = add("ablation-length", help="train/eval input-length grid")
    p.add_argument("--train-lengths", type=_int_list, required=True)
    p.add_argument("--eval-lengths", type=_int_list, required=True)
    p.add_argument("--dataset", default="dataset_reranker.jsonl")
    p.add_argument("--base-run", default="run_dense_eval.trec")
    p = add("gen-synthetic", help="generate a synthetic corpus plus config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=["passage", "document"], default="passage")
    p.add_argument("--docs", type=int, default=5000)
    p.add_argument("--train-queries", type=int, default=500)
    p.add_argument("--eval-queries", type=int, default=200)
    p.add_argument("--topics", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _collect_overrides(extras: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(extras):
        key = extras[i]
        if not key.startswith("--") or "." not in key:
            raise ConfigError(f"unrecognized argument {key!r}; config overrides look like "
                              "--section.key VALUE")
        if i + 1 >= len(extras):
            raise ConfigError(f"override {key!r} is missing its value")
        overrides.append((key[2:], extras[i + 1]))
        i += 2
    return overrides


def _gen_synthetic(args) -> None:
    spec = SyntheticSpec(n_docs=args.docs, n_train_queries=args.train_queries,
                         n_eval_queries=args.eval_queries, n_topics=args.topics,
                         mode=args.mode, seed=args.seed)
    paths = generate_synthetic(args.out_dir, spec)
    cfg = PipelineConfig()
    cfg.paths.corpus = paths["corpus"]
    cfg.paths.queries_train = paths["queries_train"]
    cfg.paths.queries_eval = paths["queries_eval"]
    cfg.paths.qrels_train = paths["qrels_train"]
    cfg.paths.qrels_eval = paths["qrels_eval"]
    cfg.paths.workdir = os.path.join(args.out_dir, "work")
    cfg.pipeline.mode = args.mode
    config_path = os.path.join(args.out_dir, "config.ini")
    write_config(config_path, cfg)
    print(f"wrote {len(paths)} data files and {config_path}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    level = logging.DEBUG if args.verbose else (logging.WARNING if args.quiet else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-synthetic":
            if extras:
                raise ConfigError(f"unrecognized arguments: {extras}")
            _gen_synthetic(args)
            return 0

        overrides = _collect_overrides(extras)
        cfg = load_config(args.config, overrides)
        if args.command in STAGES:
            params: dict = {}
            if args.command == "index":
                params = {"kind": args.kind, "embeddings": args.embeddings, "out": args.out}
            elif args.command == "train-retriever":
                params = {"dataset": args.dataset, "out": args.out}
            elif args.command == "encode":
                params = {"ckpt": args.ckpt, "out": args.out, "strategy": args.strategy}
            elif args.command == "retrieve":
                params = {"source": args.source, "split": args.split, "ckpt": args.ckpt,
                          "out": args.out, "depth": args.depth}
            elif args.command == "mine":
                params = {"sources": args.sources.split(",") if args.sources else None,
                          "depth": args.depth, "m": args.m,
                          "blend": [float(x) for x in args.blend.split(",")] if args.blend else None,
                          "split": args.split, "out": args.out}
            elif args.command == "train-reranker":
                params = {"dataset": args.dataset, "out": args.out}
            elif args.command == "rerank":
                params = {"run": args.run, "ckpt": args.ckpt, "split": args.split,
                          "out": args.out, "k": args.k, "max_len": args.max_len}
            elif args.command == "eval":
                params = {"runs": [r.strip() for r in args.runs.split(",") if r.strip()],
                          "split": args.split, "out": args.out}
            artifacts = run_stage(cfg, args.command, **params)
        elif args.command == "run-all":
            artifacts = run_all(cfg)
        elif args.command == "doc-compare":
            artifacts = run_document_compare(cfg)
        elif args.command == "ablation-lora":
            artifacts = run_ablation_lora(cfg, dataset=args.dataset)
        elif args.command == "ablation-length":
            artifacts = run_ablation_length(cfg, args.train_lengths, args.eval_lengths,
                                            dataset=args.dataset, base_run=args.base_run)
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command!r}")
        for name, path in artifacts.items():
            print(f"wrote {path}")
        return 0
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except DependencyError as exc:
        logger.error("dependency error: %s", exc)
        return 3
    except DataError as exc:
        logger.error("data error: %s", exc)
        return 4
    except MarrowError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
