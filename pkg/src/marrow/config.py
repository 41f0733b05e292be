"""Pipeline configuration: INI-style sections of key=value pairs.

Every key can be overridden on the command line as `--section.key value`.
Unknown sections or keys are configuration errors so typos fail fast.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import HEAD_NONE, HEAD_SCALAR, ModelConfig
from .retriever import EncoderTrainConfig


@dataclass
class PathsSection:
    corpus: str = ""
    queries_train: str = ""
    queries_eval: str = ""
    qrels_train: str = ""
    qrels_eval: str = ""
    workdir: str = "work"
    corpus_format: str = "auto"


@dataclass
class TokenizerSection:
    vocab_cap: int = 8192


@dataclass
class EncoderSection:
    """Model plus training knobs for one encoder (retriever or reranker)."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 256
    rope_theta: float = 10000.0
    lora_rank: int = 4
    lora_alpha: float = 8.0
    finetune: str = "full"
    temperature: float = 0.05
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 8
    negatives_per_query: int = 4
    epochs: int = 1
    seed: int = 0
    max_query_tokens: int = 48
    max_doc_tokens: int = 192


@dataclass
class MiningSection:
    sources: str = "run_bm25_train.trec"
    depth: int = 100
    negatives: int = 8
    blend: str = ""  # comma weights parallel to sources; empty = uniform
    seed: int = 0


@dataclass
class PipelineSection:
    retrieve_depth: int = 1000
    rerank_depth: int = 0  # 0 = mode default (200 passage / 100 document)
    mode: str = "passage"
    doc_strategy: str = "whole-truncate"
    maxp_window: int = 0  # 0 = max_seq_len - 1
    maxp_stride: int = 0  # 0 = window // 2
    keep_tail: bool = True
    rel_threshold: int = 1
    metrics: str = "mrr@10,recall@1000,ndcg@10"
    retriever_rounds: int = 2
    bm25_k1: float = 0.9
    bm25_b: float = 0.4
    seed: int = 0


_SECTION_TYPES = {
    "paths": PathsSection,
    "tokenizer": TokenizerSection,
    "retriever": EncoderSection,
    "reranker": EncoderSection,
    "mining": MiningSection,
    "pipeline": PipelineSection,
}


@dataclass
class PipelineConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    retriever: EncoderSection = field(default_factory=EncoderSection)
    reranker: EncoderSection = field(default_factory=lambda: EncoderSection(
        temperature=1.0, negatives_per_query=7, batch_size=4, seed=1))
    mining: MiningSection = field(default_factory=MiningSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    def validate(self) -> None:
        p = self.pipeline
        if p.mode not in ("passage", "document"):
            raise ConfigError(f"pipeline.mode must be 'passage' or 'document', got {p.mode!r}")
        if p.doc_strategy not in ("whole-truncate", "maxp"):
            raise ConfigError(f"pipeline.doc_strategy must be 'whole-truncate' or 'maxp', "
                              f"got {p.doc_strategy!r}")
        if self.rerank_depth > p.retrieve_depth:
            raise ConfigError(f"rerank_depth {self.rerank_depth} exceeds "
                              f"retrieve_depth {p.retrieve_depth}")
        for name, enc in (("retriever", self.retriever), ("reranker", self.reranker)):
            if enc.finetune not in ("full", "lora"):
                raise ConfigError(f"{name}.finetune must be 'full' or 'lora'")

    @property
    def rerank_depth(self) -> int:
        if self.pipeline.rerank_depth > 0:
            return self.pipeline.rerank_depth
        return 100 if self.pipeline.mode == "document" else 200

    def metric_list(self) -> list[str]:
        return [m.strip() for m in self.pipeline.metrics.split(",") if m.strip()]

    def model_config(self, which: str, vocab_size: int) -> ModelConfig:
        sec = self.retriever if which == "retriever" else self.reranker
        return ModelConfig(
            vocab_size=vocab_size, d_model=sec.d_model, n_layers=sec.n_layers,
            n_heads=sec.n_heads, d_ff=sec.d_ff, max_seq_len=sec.max_seq_len,
            rope_theta=sec.rope_theta, lora_rank=sec.lora_rank, lora_alpha=sec.lora_alpha,
            head=HEAD_SCALAR if which == "reranker" else HEAD_NONE)

    def train_config(self, which: str, vocab_size: int) -> EncoderTrainConfig:
        sec = self.retriever if which == "retriever" else self.reranker
        return EncoderTrainConfig(
            model=self.model_config(which, vocab_size),
            temperature=sec.temperature, lr=sec.lr, weight_decay=sec.weight_decay,
            batch_size=sec.batch_size, negatives_per_query=sec.negatives_per_query,
            epochs=sec.epochs, seed=sec.seed, finetune=sec.finetune,
            max_query_tokens=sec.max_query_tokens, max_doc_tokens=sec.max_doc_tokens)

    def snapshot(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTION_TYPES}


def _coerce(section: str, key: str, raw: str, target_type) -> object:
    try:
        if target_type is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{target_type.__name__}") from exc


def _apply(config: PipelineConfig, section: str, key: str, raw: str) -> None:
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(config, section)
    by_name = {f.name: f for f in fields(target)}
    if key not in by_name:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    current = getattr(target, key)
    setattr(target, key, _coerce(section, key, raw, type(current)))


def load_config(path: str | None, overrides: list[tuple[str, str]] | None = None) -> PipelineConfig:
    """Build a config from an optional INI file plus section.key overrides."""
    config = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(config, section, key, raw)
    for dotted, raw in overrides or []:
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        _apply(config, section, key, raw)
    config.validate()
    return config


def write_config(path, config: PipelineConfig) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    for name in _SECTION_TYPES:
        parser.add_section(name)
        for key, value in dataclasses.asdict(getattr(config, name)).items():
            parser.set(name, key, str(value))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        parser.write(f)
