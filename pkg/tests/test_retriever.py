"""Batch assembly, InfoNCE, the training loop, and hard-negative mining."""

import math

import numpy as np
import pytest

from marrow import autodiff as ad
from marrow.errors import ContractError, DataError, NumericError
from marrow.evaluation import Run
from marrow.model import ModelConfig
from marrow.retriever import (EncoderTrainConfig, TrainingExample, assemble_batch,
                              examples_to_rows, infonce_loss, load_dataset,
                              mine_hard_negatives, train_retriever, write_dataset)
from marrow.text import build_vocab, tokenize


def stores(n_docs=32):
    """Separable toy task: every query copies its positive's unique token."""
    doc_store = {f"d{i}": f"u{i:03d} filler words" for i in range(n_docs)}
    query_store = {f"q{i}": f"u{i:03d}" for i in range(n_docs)}
    vocab = build_vocab(list(doc_store.values()) + list(query_store.values()), cap=4096)
    return doc_store, query_store, vocab


def examples_for(doc_store, n, n_negs=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        others = [f"d{j}" for j in range(len(doc_store)) if j != i]
        negs = [others[j] for j in rng.choice(len(others), size=n_negs, replace=False)]
        out.append(TrainingExample(f"q{i}", f"d{i}", negs))
    return out


class TestTrainingExample:
    def test_positive_among_negatives_rejected(self):
        with pytest.raises(ContractError):
            TrainingExample("q", "d1", ["d1", "d2"])

    def test_duplicate_negatives_rejected(self):
        with pytest.raises(ContractError):
            TrainingExample("q", "d1", ["d2", "d2"])


class TestAssembleBatch:
    def test_single_query(self):
        doc_store, query_store, vocab = stores(8)
        batch = assemble_batch(examples_for(doc_store, 1, n_negs=2), 2, doc_store,
                               query_store, vocab, 16, 16, np.random.default_rng(0))
        assert len(batch.candidate_tokens) == 3
        assert batch.positive_indices == [0]
        assert batch.negatives_per_query == 2

    def test_paper_scale_formula(self):
        doc_store, query_store, vocab = stores(80)
        batch = assemble_batch(examples_for(doc_store, 4, n_negs=15), 15, doc_store,
                               query_store, vocab, 16, 16, np.random.default_rng(1))
        assert len(batch.candidate_tokens) == 64
        assert batch.negatives_per_query == 63
        assert batch.positive_indices == [0, 16, 32, 48]

    def test_layout_matches_index_arithmetic(self):
        doc_store, query_store, vocab = stores(40)
        rng = np.random.default_rng(2)
        for b, m in [(2, 3), (5, 1), (3, 7)]:
            exs = examples_for(doc_store, b, n_negs=m, seed=b * 10 + m)
            batch = assemble_batch(exs, m, doc_store, query_store, vocab, 16, 16, rng)
            assert batch.positive_indices == [i * (1 + m) for i in range(b)]
            for i, ex in enumerate(exs):
                expected = tokenize(doc_store[ex.positive_doc_id], vocab, 16)
                assert batch.candidate_tokens[i * (1 + m)].ids == expected.ids
            assert len(batch.candidate_tokens) == b * (1 + m)

    def test_short_pool_resamples_with_warning_counter(self):
        doc_store, query_store, vocab = stores(8)
        ex = TrainingExample("q0", "d0", ["d1", "d2"])
        batch = assemble_batch([ex], 5, doc_store, query_store, vocab, 16, 16,
                               np.random.default_rng(3))
        assert len(batch.candidate_tokens) == 6
        assert batch.resampled == 3


class TestInfonceLoss:
    def test_equal_sims_is_log_n(self):
        sim = ad.Tensor(np.zeros((2, 4)), requires_grad=True)
        loss = infonce_loss(sim, [0, 2], temperature=1.0)
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-6)

    def test_scalar_oracle(self):
        sim = ad.Tensor([[2.0, 0.0, 0.0]], requires_grad=True)
        loss = infonce_loss(sim, [0], temperature=1.0)
        expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 2.0))
        assert loss.item() == pytest.approx(expected, abs=1e-6)
        assert loss.item() == pytest.approx(0.2395, abs=1e-4)

    def test_per_query_shift_invariance(self):
        rng = np.random.default_rng(60)
        sims = rng.normal(size=(3, 9)).astype(np.float32)
        pos = [0, 3, 6]
        base = infonce_loss(ad.Tensor(sims), pos, 0.5).item()
        shifted = sims.copy()
        shifted[1] += 7.5
        after = infonce_loss(ad.Tensor(shifted), pos, 0.5).item()
        assert after == pytest.approx(base, abs=1e-6)

    def test_temperature_contract(self):
        sim = ad.Tensor(np.zeros((1, 3)))
        with pytest.raises(ContractError):
            infonce_loss(sim, [0], temperature=0.0)

    def test_nonfinite_sims_rejected(self):
        sim = ad.Tensor(np.array([[1.0, np.inf]], dtype=np.float32))
        with pytest.raises(NumericError):
            infonce_loss(sim, [0], temperature=1.0)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(61)
        for _ in range(20):
            sims = ad.Tensor(rng.normal(size=(4, 8)))
            assert infonce_loss(sims, [0, 2, 4, 6], 0.1).item() >= 0.0

    def test_gradient_sums_to_zero_per_query(self):
        rng = np.random.default_rng(62)
        sim = ad.Tensor(rng.normal(size=(3, 6)).astype(np.float64),
                        requires_grad=True, dtype=np.float64)
        tape = ad.Tape()
        loss = infonce_loss(sim, [0, 2, 4], 0.3, tape)
        tape.backward(loss)
        row_sums = sim.grad.sum(axis=1)
        assert np.abs(row_sums).max() <= 1e-6


def small_train_config(**kw):
    model = ModelConfig(vocab_size=kw.pop("vocab_size"), d_model=16, n_layers=1,
                        n_heads=2, d_ff=32, max_seq_len=16)
    base = dict(model=model, temperature=0.05, lr=1e-3, batch_size=4,
                negatives_per_query=2, epochs=1, seed=0,
                max_query_tokens=8, max_doc_tokens=8)
    base.update(kw)
    return EncoderTrainConfig(**base)


class TestTrainRetriever:
    def test_separable_task_loss_drops(self):
        doc_store, query_store, vocab = stores(32)
        dataset = examples_for(doc_store, 32)
        # 8 steps per epoch at batch 4; 25 epochs = 200 steps
        cfg = small_train_config(vocab_size=vocab.size, epochs=25, lr=3e-3)
        _, curve = train_retriever(cfg, dataset, doc_store, query_store, vocab)
        assert len(curve) == 200
        assert curve[-1][1] < 0.25 * curve[0][1]

    def test_zero_lr_leaves_weights_bitwise(self):
        doc_store, query_store, vocab = stores(16)
        dataset = examples_for(doc_store, 8)
        cfg = small_train_config(vocab_size=vocab.size, lr=0.0, epochs=1)
        from marrow.model import init_weights
        initial = init_weights(cfg.model, seed=cfg.seed)
        ckpt, _ = train_retriever(cfg, dataset, doc_store, query_store, vocab)
        for name, t in initial.items():
            assert np.array_equal(t.data, ckpt.weights[name].data), name

    def test_lora_mode_freezes_base_bitwise(self):
        doc_store, query_store, vocab = stores(16)
        dataset = examples_for(doc_store, 8)
        model = ModelConfig(vocab_size=vocab.size, d_model=16, n_layers=1, n_heads=2,
                            d_ff=32, max_seq_len=16, lora_rank=2)
        cfg = EncoderTrainConfig(model=model, lr=1e-2, batch_size=4, epochs=2,
                                 negatives_per_query=2, seed=1, finetune="lora",
                                 max_query_tokens=8, max_doc_tokens=8)
        from marrow.model import init_weights
        initial = init_weights(cfg.model, seed=cfg.seed)
        ckpt, _ = train_retriever(cfg, dataset, doc_store, query_store, vocab)
        for name, t in initial.items():
            assert np.array_equal(t.data, ckpt.weights[name].data), name
        moved = any(np.abs(b.data).max() > 0 for _, (a, b) in ckpt.adapters.items())
        assert moved, "adapters never updated"

    def test_seeded_curve_reproducible(self):
        doc_store, query_store, vocab = stores(16)
        dataset = examples_for(doc_store, 12)
        cfg = small_train_config(vocab_size=vocab.size, epochs=2, seed=7)
        _, c1 = train_retriever(cfg, dataset, doc_store, query_store, vocab)
        _, c2 = train_retriever(cfg, dataset, doc_store, query_store, vocab)
        assert c1 == c2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_divergence_aborts(self):
        doc_store, query_store, vocab = stores(16)
        dataset = examples_for(doc_store, 8)
        cfg = small_train_config(vocab_size=vocab.size, lr=1e18, epochs=50)
        with pytest.raises(NumericError):
            train_retriever(cfg, dataset, doc_store, query_store, vocab)

    def test_empty_dataset_rejected(self):
        doc_store, query_store, vocab = stores(4)
        cfg = small_train_config(vocab_size=vocab.size)
        with pytest.raises(ContractError):
            train_retriever(cfg, [], doc_store, query_store, vocab)


class TestMining:
    def run_of(self, per_query):
        return Run(entries={q: [(d, float(len(docs) - i)) for i, d in enumerate(docs)]
                            for q, docs in per_query.items()}, tag="x")

    def test_only_positive_in_run_skips_query(self):
        runs = {"a": self.run_of({"q1": ["dpos"]})}
        qrels = {"q1": {"dpos": 1}}
        examples, stats = mine_hard_negatives(runs, qrels, depth=10, m=2)
        assert examples == []
        assert stats.queries_skipped_no_candidates == 1

    def test_no_positive_skips_query(self):
        runs = {"a": self.run_of({"q1": ["d1", "d2"]})}
        qrels = {"q1": {"d1": 0}}
        examples, stats = mine_hard_negatives(runs, qrels, depth=10, m=1)
        assert examples == []
        assert stats.queries_skipped_no_positive == 1

    def test_negatives_never_relevant(self):
        rng = np.random.default_rng(63)
        docs = [f"d{i}" for i in range(50)]
        qrels = {}
        per_query = {}
        for qi in range(10):
            qid = f"q{qi}"
            judged = {d: int(rng.integers(0, 3)) for d in
                      rng.choice(docs, size=8, replace=False)}
            if not any(g > 0 for g in judged.values()):
                judged[docs[qi]] = 1
            qrels[qid] = judged
            per_query[qid] = list(rng.permutation(docs))[:30]
        examples, _ = mine_hard_negatives({"a": self.run_of(per_query)}, qrels,
                                          depth=30, m=5, seed=3)
        for ex in examples:
            for neg in ex.hard_negative_doc_ids:
                assert qrels[ex.query_id].get(neg, 0) == 0

    def test_blend_ratio_over_seeds(self):
        """50/50 blend over disjoint pools lands near 8 of 16 per source."""
        a_docs = [f"a{i}" for i in range(100)]
        b_docs = [f"b{i}" for i in range(100)]
        runs = {"a": self.run_of({"q": a_docs}), "b": self.run_of({"q": b_docs})}
        qrels = {"q": {"pos": 1}}
        total_a = 0
        n_seeds = 1000
        for seed in range(n_seeds):
            examples, stats = mine_hard_negatives(runs, qrels, depth=100, m=16,
                                                  blend={"a": 0.5, "b": 0.5}, seed=seed)
            assert len(examples[0].hard_negative_doc_ids) == 16
            total_a += stats.picks_per_source["a"]
        fraction = total_a / (n_seeds * 16)
        assert abs(fraction - 0.5) <= 0.02

    def test_uniqueness_across_overlapping_runs(self):
        shared = [f"s{i}" for i in range(20)]
        runs = {"a": self.run_of({"q": shared}), "b": self.run_of({"q": shared})}
        qrels = {"q": {"pos": 1}}
        examples, _ = mine_hard_negatives(runs, qrels, depth=20, m=10, seed=5)
        negs = examples[0].hard_negative_doc_ids
        assert len(set(negs)) == len(negs) == 10

    def test_depth_must_cover_m(self):
        runs = {"a": self.run_of({"q": ["d1"]})}
        with pytest.raises(ContractError):
            mine_hard_negatives(runs, {"q": {"p": 1}}, depth=2, m=5)


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        examples = [TrainingExample("q1", "d1", ["d2", "d3"]),
                    TrainingExample("q2", "d9", ["d4"])]
        path = tmp_path / "dataset.jsonl"
        write_dataset(path, examples_to_rows(examples))
        loaded = load_dataset(path)
        assert [e.query_id for e in loaded] == ["q1", "q2"]
        assert loaded[0].positive_doc_id == "d1"
        assert loaded[0].hard_negative_doc_ids == ["d2", "d3"]

    def test_positives_expanded_from_qrels(self, tmp_path):
        qrels = {"q1": {"d1": 1, "d5": 2, "d9": 0}}
        rows = examples_to_rows([TrainingExample("q1", "d5", ["d2"])], qrels)
        assert rows[0]["pos"] == ["d5", "d1"]  # grade desc, id asc

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        path.write_text('{"qid": "q1", "pos": ["d1"], "neg": []}\nnot json\n')
        with pytest.raises(DataError, match=":2:"):
            load_dataset(path)

    def test_invalid_example_line(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        path.write_text('{"qid": "q1", "pos": ["d1"], "neg": ["d1"]}\n')
        with pytest.raises(DataError, match=":1:"):
            load_dataset(path)
