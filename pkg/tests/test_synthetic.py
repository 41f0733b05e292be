"""Properties of the bundled synthetic corpus generator."""

import numpy as np
import pytest

from marrow.errors import ConfigError
from marrow.evaluation import load_qrels
from marrow.synthetic import SyntheticSpec, generate_synthetic, to_original
from marrow.text import read_corpus, read_queries, split_words


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    spec = SyntheticSpec(n_docs=300, n_train_queries=40, n_eval_queries=20,
                         n_salient_pairs=60, n_topics=12, seed=5)
    paths = generate_synthetic(root, spec)
    return spec, paths


def test_counts(small_world):
    spec, paths = small_world
    assert len(list(read_corpus(paths["corpus"]))) == 300
    assert len(list(read_queries(paths["queries_train"]))) == 40
    assert len(list(read_queries(paths["queries_eval"]))) == 20
    assert len(load_qrels(paths["qrels_train"])) == 40


def test_synonyms_never_in_documents(small_world):
    _, paths = small_world
    doc_words = {w for _, t in read_corpus(paths["corpus"]) for w in split_words(t)}
    assert not any(w.startswith("y") for w in doc_words)
    q_words = {w for _, t in read_queries(paths["queries_train"]) for w in split_words(t)}
    assert any(w.startswith("y") for w in q_words), "no substitutions happened at all"


def test_query_source_words_present_in_positive(small_world):
    _, paths = small_world
    store = dict(read_corpus(paths["corpus"]))
    qrels = load_qrels(paths["qrels_train"])
    for qid, text in read_queries(paths["queries_train"]):
        positive = next(iter(qrels[qid]))
        doc_words = set(split_words(store[positive]))
        for w in split_words(text):
            original = to_original(w) if w.startswith("y") else w
            assert original in doc_words, f"{qid}: {w} not grounded in {positive}"


def test_synonyms_recur_across_training_queries(small_world):
    """Learnability: typical synonym appears in several training queries."""
    spec, paths = small_world
    from collections import Counter
    counts = Counter(w for _, t in read_queries(paths["queries_train"])
                     for w in split_words(t) if w.startswith("y"))
    assert sum(counts.values()) / spec.n_salient_pairs >= 1.0


def test_template_markers_in_common_pool(small_world):
    _, paths = small_world
    doc_words = {w for _, t in read_corpus(paths["corpus"]) for w in split_words(t)}
    assert "query" in doc_words and "document" in doc_words


def test_deterministic_bytes(tmp_path):
    spec = SyntheticSpec(n_docs=100, n_train_queries=10, n_eval_queries=5,
                         n_salient_pairs=40, n_topics=6, seed=9)
    p1 = generate_synthetic(tmp_path / "a", spec)
    p2 = generate_synthetic(tmp_path / "b", spec)
    for key in ("corpus", "queries_train", "qrels_eval"):
        assert open(p1[key], "rb").read() == open(p2[key], "rb").read()


def test_document_mode_long_docs(tmp_path):
    spec = SyntheticSpec(n_docs=60, n_train_queries=10, n_eval_queries=5,
                         n_salient_pairs=40, n_topics=6, mode="document", seed=3)
    paths = generate_synthetic(tmp_path / "docs", spec)
    lengths = [len(split_words(t)) for _, t in read_corpus(paths["corpus"])]
    assert min(lengths) >= 3 * spec.doc_len_lo
    assert max(lengths) <= 6 * spec.doc_len_hi


def test_too_many_queries_rejected(tmp_path):
    with pytest.raises(ConfigError):
        SyntheticSpec(n_docs=10, n_train_queries=8, n_eval_queries=8)
