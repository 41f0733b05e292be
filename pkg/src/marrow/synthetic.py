"""Synthetic retrieval corpora with controlled vocabulary mismatch.

The corpus describes a universe of entities. Every entity owns a handful of
attribute words drawn from one global pool (k###); each of its documents
mentions a subset of those attributes on top of topical filler and a
Zipf-weighted common pool. A query is derived from one source document by
copying a few of its attribute words and swapping each for its query-side
synonym (y###) with probability p_substitute. Judgments mark the source
document grade 2 and every other document of the same entity grade 1.

Synonyms never occur in documents, so a lexical matcher only sees the
intact words. A dense model can close the gap because the structure is
learnable at small scale: every synonym recurs across many training
queries, and every attribute word recurs across many entities' documents,
so aligning y### with k### transfers to documents that were never training
positives. Document mode concentrates the attribute words inside one
contiguous band of a long document, which is what makes segmented (MaxP)
scoring interesting there.

Ids, texts and judgments are fully determined by the seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

# the pair-template markers ride along so they are always in-vocabulary
_COMMON_EXTRA = ("query", "document")


@dataclass
class SyntheticSpec:
    n_docs: int = 5000
    n_train_queries: int = 500
    n_eval_queries: int = 200
    n_entities: int = 500
    n_salient_pairs: int = 300
    attrs_per_entity: int = 6
    attrs_per_doc_lo: int = 3
    attrs_per_doc_hi: int = 5
    n_topics: int = 25
    filler_per_topic: int = 12
    n_common: int = 100
    doc_len_lo: int = 30
    doc_len_hi: int = 60
    query_len_lo: int = 3
    query_len_hi: int = 4
    p_filler: float = 0.5  # non-attribute positions: filler vs common split
    p_substitute: float = 0.9
    mode: str = "passage"  # "passage" or "document"
    band_len: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("passage", "document"):
            raise ConfigError(f"mode must be 'passage' or 'document', got {self.mode!r}")
        if self.n_docs < self.n_train_queries + self.n_eval_queries:
            raise ConfigError("need at least one distinct document per query")
        if not (0.0 <= self.p_substitute <= 1.0):
            raise ConfigError("p_substitute must lie in [0, 1]")
        if self.attrs_per_entity > self.n_salient_pairs:
            raise ConfigError("attrs_per_entity exceeds the attribute vocabulary")
        if not (1 <= self.attrs_per_doc_lo <= self.attrs_per_doc_hi <= self.attrs_per_entity):
            raise ConfigError("need 1 <= attrs_per_doc_lo <= attrs_per_doc_hi <= attrs_per_entity")
        if self.query_len_lo > self.attrs_per_doc_lo:
            raise ConfigError("query_len_lo exceeds the attributes guaranteed per document")
        if self.doc_len_lo < self.attrs_per_doc_hi or self.doc_len_lo > self.doc_len_hi:
            raise ConfigError("doc length range cannot hold the attribute words")


def _attribute_word(i: int) -> str:
    return f"k{i:03d}"


def _synonym_word(i: int) -> str:
    return f"y{i:03d}"


def to_synonym(word: str) -> str:
    return "y" + word[1:]


def to_original(word: str) -> str:
    return "k" + word[1:]


def _common_pool(spec: SyntheticSpec) -> tuple[list[str], np.ndarray]:
    words = list(_COMMON_EXTRA) + [f"c{j:03d}" for j in range(spec.n_common)]
    weights = 1.0 / np.arange(1, len(words) + 1)
    return words, weights / weights.sum()


def _background(spec: SyntheticSpec, topic: int, n: int, rng: np.random.Generator,
                common: tuple[list[str], np.ndarray]) -> list[str]:
    words, weights = common
    out = []
    for _ in range(n):
        if rng.random() < spec.p_filler:
            out.append(f"t{topic:03d}f{int(rng.integers(spec.filler_per_topic)):02d}")
        else:
            out.append(words[int(rng.choice(len(words), p=weights))])
    return out


def _doc_tokens(spec: SyntheticSpec, topic: int, attrs: list[int], length: int,
                rng: np.random.Generator, common) -> list[str]:
    """Attribute words once each (sometimes twice), background fills the
    rest, order shuffled."""
    tokens = [_attribute_word(i) for i in attrs]
    for i in attrs:
        if rng.random() < 0.25 and len(tokens) < length:
            tokens.append(_attribute_word(i))
    tokens += _background(spec, topic, max(0, length - len(tokens)), rng, common)
    perm = rng.permutation(len(tokens))
    return [tokens[int(j)] for j in perm]


def _document_mode_tokens(spec: SyntheticSpec, topic: int, attrs: list[int],
                          rng: np.random.Generator, common) -> list[str]:
    """Long document whose attribute content sits in one contiguous band."""
    length = int(rng.integers(3 * spec.doc_len_lo, 6 * spec.doc_len_hi + 1))
    band = min(max(spec.band_len, spec.attrs_per_doc_hi + 4), length)
    start = int(rng.integers(0, length - band + 1))
    tokens = _background(spec, topic, length, rng, common)
    tokens[start:start + band] = _doc_tokens(spec, topic, attrs, band, rng, common)
    return tokens


def generate_synthetic(out_dir, spec: SyntheticSpec) -> dict[str, str]:
    """Write corpus/queries/qrels files; returns the path map."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    common = _common_pool(spec)

    entity_attrs = [sorted(int(j) for j in
                           rng.choice(spec.n_salient_pairs, size=spec.attrs_per_entity,
                                      replace=False))
                    for _ in range(spec.n_entities)]

    doc_entity: list[int] = []
    doc_attrs: list[list[int]] = []
    docs: list[tuple[str, list[str]]] = []
    entity_docs: dict[int, list[str]] = {}
    for i in range(spec.n_docs):
        entity = int(rng.integers(spec.n_entities))
        topic = int(rng.integers(spec.n_topics))
        n_attrs = int(rng.integers(spec.attrs_per_doc_lo, spec.attrs_per_doc_hi + 1))
        attrs = sorted(entity_attrs[entity][int(j)] for j in
                       rng.choice(spec.attrs_per_entity, size=n_attrs, replace=False))
        if spec.mode == "document":
            tokens = _document_mode_tokens(spec, topic, attrs, rng, common)
        else:
            length = int(rng.integers(spec.doc_len_lo, spec.doc_len_hi + 1))
            tokens = _doc_tokens(spec, topic, attrs, length, rng, common)
        doc_id = f"d{i:05d}"
        docs.append((doc_id, tokens))
        doc_entity.append(entity)
        doc_attrs.append(attrs)
        entity_docs.setdefault(entity, []).append(doc_id)

    n_queries = spec.n_train_queries + spec.n_eval_queries
    order = rng.permutation(spec.n_docs)[:n_queries]
    queries: list[tuple[str, str, str, int]] = []  # qid, text, source doc, entity
    for used, doc_pos in enumerate(order):
        idx = int(doc_pos)
        doc_id, _ = docs[idx]
        attrs = doc_attrs[idx]
        q_len = int(rng.integers(spec.query_len_lo, spec.query_len_hi + 1))
        q_len = min(q_len, len(attrs))
        picked = [attrs[int(j)] for j in rng.choice(len(attrs), size=q_len, replace=False)]
        terms = [_synonym_word(i) if rng.random() < spec.p_substitute else _attribute_word(i)
                 for i in picked]
        queries.append((f"q{used:05d}", " ".join(terms), doc_id, doc_entity[idx]))

    paths = {
        "corpus": os.path.join(out_dir, "corpus.tsv"),
        "queries_train": os.path.join(out_dir, "queries_train.tsv"),
        "queries_eval": os.path.join(out_dir, "queries_eval.tsv"),
        "qrels_train": os.path.join(out_dir, "qrels_train.txt"),
        "qrels_eval": os.path.join(out_dir, "qrels_eval.txt"),
        "meta": os.path.join(out_dir, "meta.json"),
    }
    with open(paths["corpus"], "w", encoding="utf-8", newline="\n") as f:
        for doc_id, tokens in docs:
            f.write(f"{doc_id}\t{' '.join(tokens)}\n")
    train = queries[: spec.n_train_queries]
    evalq = queries[spec.n_train_queries:]
    for split, path_q, path_r in ((train, paths["queries_train"], paths["qrels_train"]),
                                  (evalq, paths["queries_eval"], paths["qrels_eval"])):
        with open(path_q, "w", encoding="utf-8", newline="\n") as f:
            for qid, text, _, _ in split:
                f.write(f"{qid}\t{text}\n")
        with open(path_r, "w", encoding="utf-8", newline="\n") as f:
            for qid, _, doc_id, entity in split:
                f.write(f"{qid} 0 {doc_id} 2\n")
                for other in entity_docs[entity]:
                    if other != doc_id:
                        f.write(f"{qid} 0 {other} 1\n")
    with open(paths["meta"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(asdict(spec), f, sort_keys=True, indent=2)
        f.write("\n")
    return paths
