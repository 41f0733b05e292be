"""Vocabulary, tokenization and MaxP segmentation."""

import re
from collections import Counter

import numpy as np
import pytest

from marrow.errors import ContractError, DataError
from marrow.text import (EOS_ID, N_RESERVED, PAD_ID, UNK_ID, TokenSequence, Vocabulary,
                         build_vocab, read_corpus, read_queries, segment_maxp,
                         split_words, tokenize)


def random_text(rng, n_words, pool=100):
    return " ".join(f"w{int(rng.integers(pool))}" for _ in range(n_words))


class TestBuildVocab:
    def test_frequency_order_and_reserved(self):
        vocab = build_vocab(["a a b"], cap=5)
        assert vocab.size == 5
        assert vocab.token_id("a") == N_RESERVED  # most frequent gets the first free id
        assert vocab.token_id("b") == N_RESERVED + 1
        assert (PAD_ID, UNK_ID, EOS_ID) == (0, 1, 2)

    def test_cap_maps_overflow_to_unk(self):
        vocab = build_vocab(["x x x y y z"], cap=5)  # room for two tokens
        assert "z" not in vocab
        assert tokenize("z", vocab, 4).ids == [UNK_ID]

    def test_tie_broken_by_first_occurrence(self):
        vocab = build_vocab(["b a", "a b c c"], cap=6)
        assert vocab.token_id("b") < vocab.token_id("a")
        assert vocab.token_id("c") > vocab.token_id("a")  # equal counts, later first sight

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            build_vocab(["", "  "], cap=10)

    def test_small_cap_rejected(self):
        with pytest.raises(ContractError):
            build_vocab(["a"], cap=3)

    def test_ranking_matches_counting_oracle(self):
        rng = np.random.default_rng(11)
        docs = [random_text(rng, int(rng.integers(5, 40)), pool=60) for _ in range(100)]
        counts = Counter(w for d in docs for w in d.lower().split())
        vocab = build_vocab(docs, cap=30)
        kept = vocab.tokens()
        assert len(kept) == 27
        ranked = sorted(counts.values(), reverse=True)
        kept_counts = sorted((counts[t] for t in kept), reverse=True)
        assert kept_counts == ranked[:27]

    def test_sharding_independent(self):
        rng = np.random.default_rng(12)
        docs = [random_text(rng, 20, pool=40) for _ in range(50)]
        one = build_vocab(docs, cap=25)
        two = build_vocab(iter(docs), cap=25)
        assert one.tokens() == two.tokens()


class TestTokenize:
    def test_lowercasing(self):
        vocab = build_vocab(["the cat"], cap=10)
        out = tokenize("The CAT", vocab, 10)
        assert out.ids == [vocab.token_id("the"), vocab.token_id("cat")]
        assert not out.truncated

    def test_truncation_flag(self):
        vocab = build_vocab(["a b c d e f g h i j"], cap=20)
        out = tokenize("a b c d e f g h i j", vocab, 4)
        assert len(out.ids) == 4 and out.truncated

    def test_oov_becomes_unk(self):
        vocab = build_vocab(["known words"], cap=10)
        assert tokenize("unknown", vocab, 5).ids == [UNK_ID]

    def test_empty_text(self):
        vocab = build_vocab(["a"], cap=5)
        out = tokenize("", vocab, 5)
        assert out.ids == [] and not out.truncated

    def test_bad_max_len(self):
        vocab = build_vocab(["a"], cap=5)
        with pytest.raises(ContractError):
            tokenize("a", vocab, 0)

    def test_count_matches_regex_oracle(self):
        rng = np.random.default_rng(13)
        vocab = build_vocab(["words exist"], cap=10)
        chars = "ab c.d-e;X! \t\n:92"
        for _ in range(50):
            text = "".join(rng.choice(list(chars), size=int(rng.integers(0, 60))))
            expected = len(re.findall(r"\w+", text.lower()))
            assert len(tokenize(text, vocab, 10_000).ids) == expected


class TestSegmentMaxp:
    def test_whole_doc_single_segment(self):
        doc = TokenSequence(list(range(10)))
        segs = segment_maxp(doc, window=10, stride=10)
        assert len(segs) == 1 and segs[0].ids == doc.ids

    def test_enumerated_starts(self):
        doc = TokenSequence(list(range(10)))
        segs = segment_maxp(doc, window=4, stride=2)
        assert len(segs) == 5
        assert [s.ids[0] for s in segs] == [0, 2, 4, 6, 8]
        assert [len(s) for s in segs] == [4, 4, 4, 4, 2]

    def test_stride_beyond_window_rejected(self):
        with pytest.raises(ContractError):
            segment_maxp(TokenSequence(list(range(10))), window=3, stride=4)

    def test_reconstruction_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            n = int(rng.integers(1, 60))
            window = int(rng.integers(1, 20))
            stride = int(rng.integers(1, window + 1))
            ids = rng.integers(0, 1000, size=n).tolist()
            segs = segment_maxp(TokenSequence(ids), window, stride)
            rebuilt = []
            for s in segs[:-1]:
                rebuilt.extend(s.ids[:stride])
            rebuilt.extend(segs[-1].ids)
            assert rebuilt == ids
            # consecutive overlap is window - stride except possibly at the end
            for a, b in zip(segs, segs[1:]):
                overlap = max(0, len(a.ids) - stride)
                assert a.ids[stride:] == b.ids[:overlap]

    def test_empty_doc(self):
        segs = segment_maxp(TokenSequence([]), window=4, stride=2)
        assert len(segs) == 1 and segs[0].ids == []


class TestVocabularyRoundTrip:
    def test_save_load(self, tmp_path):
        vocab = build_vocab(["alpha beta gamma alpha"], cap=10)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        again = Vocabulary.load(path)
        assert again.tokens() == vocab.tokens()
        assert again.token_id("beta") == vocab.token_id("beta")


class TestCorpusIO:
    def test_tsv_and_jsonl_equivalent(self, tmp_path):
        tsv = tmp_path / "c.tsv"
        tsv.write_text("d1\thello world\nd2\tsecond doc\n", encoding="utf-8")
        jsonl = tmp_path / "c.jsonl"
        jsonl.write_text('{"id": "d1", "contents": "hello world"}\n'
                         '{"id": "d2", "contents": "second doc"}\n', encoding="utf-8")
        assert list(read_corpus(tsv)) == list(read_corpus(jsonl))

    def test_malformed_tsv_line_number(self, tmp_path):
        bad = tmp_path / "c.tsv"
        bad.write_text("d1\tok\nno-tab-line\n", encoding="utf-8")
        with pytest.raises(DataError, match=":2:"):
            list(read_corpus(bad))

    def test_malformed_jsonl_line_number(self, tmp_path):
        bad = tmp_path / "c.jsonl"
        bad.write_text('{"id": "d1", "contents": "x"}\n{oops\n', encoding="utf-8")
        with pytest.raises(DataError, match=":2:"):
            list(read_corpus(bad))

    def test_queries(self, tmp_path):
        q = tmp_path / "q.tsv"
        q.write_text("q1\twhat is up\n", encoding="utf-8")
        assert list(read_queries(q)) == [("q1", "what is up")]
