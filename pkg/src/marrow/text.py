"""Tokenization, vocabulary construction, truncation and document segmentation.

The tokenizer lowercases and keeps alphanumeric runs (punctuation and
whitespace are separators). Ids 0/1/2 are reserved for pad/unk/eos and are
never reassigned.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .errors import ContractError, DataError

PAD_ID = 0
UNK_ID = 1
EOS_ID = 2
N_RESERVED = 3

_WORD_RE = re.compile(r"\w+")


def split_words(text: str) -> list[str]:
    """Lowercased alphanumeric runs; the vocab-independent word splitter."""
    return _WORD_RE.findall(text.lower())


@dataclass
class TokenSequence:
    """Token ids plus a flag recording whether truncation dropped tokens."""

    ids: list[int]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


class Vocabulary:
    """Frequency-ranked token table with fixed reserved ids.

    Ids are dense in [0, size); 0=pad, 1=unk, 2=eos. Immutable after build.
    """

    def __init__(self, tokens: list[str]):
        self._id_to_token = list(tokens)
        self._token_to_id = {t: i + N_RESERVED for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ContractError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self._id_to_token) + N_RESERVED

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order (id = position + 3)."""
        return list(self._id_to_token)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for t in self._id_to_token:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(corpus: Iterable[str], cap: int) -> Vocabulary:
    """Rank tokens by frequency (ties by first occurrence), keep cap-3.

    The counts are global, so the result does not depend on how the corpus
    stream was sharded before concatenation.
    """
    if cap <= N_RESERVED:
        raise ContractError(f"vocab cap must exceed {N_RESERVED}, got {cap}")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    n_words = 0
    for text in corpus:
        for w in split_words(text):
            counts[w] += 1
            if w not in first_seen:
                first_seen[w] = n_words
            n_words += 1
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    return Vocabulary(ranked[: cap - N_RESERVED])


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """First max_len word tokens mapped to ids; OOV becomes unk."""
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    words = split_words(text)
    truncated = len(words) > max_len
    return TokenSequence([vocab.token_id(w) for w in words[:max_len]], truncated)


def segment_maxp(doc: TokenSequence, window: int, stride: int) -> list[TokenSequence]:
    """Overlapping segments starting at every multiple of stride.

    Consecutive segments overlap by window - stride; the last segments may
    be shorter. A stride larger than the window would leave gaps, which
    loses tokens, so it is rejected.
    """
    if not (1 <= stride <= window):
        raise ContractError(f"need 1 <= stride <= window, got stride={stride} window={window}")
    ids = doc.ids
    if not ids:
        return [TokenSequence([], doc.truncated)]
    return [TokenSequence(ids[start:start + window], doc.truncated)
            for start in range(0, len(ids), stride)]


# --- corpus and query file formats ---


def _detect_format(path: str) -> str:
    p = str(path)
    if p.endswith(".jsonl") or p.endswith(".json"):
        return "jsonl"
    return "tsv"


def read_corpus(path, fmt: str = "auto") -> Iterator[tuple[str, str]]:
    """Yield (doc_id, text) from a TSV (id<TAB>text) or JSONL corpus file."""
    if fmt == "auto":
        fmt = _detect_format(path)
    if fmt not in ("tsv", "jsonl"):
        raise DataError(f"unsupported corpus format: {fmt}")
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            if fmt == "tsv":
                parts = line.split("\t", 1)
                if len(parts) != 2 or not parts[0]:
                    raise DataError(f"{path}:{lineno}: expected 'doc_id<TAB>text'")
                yield parts[0], parts[1]
            else:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
                if not isinstance(obj, dict) or "id" not in obj or "contents" not in obj:
                    raise DataError(f"{path}:{lineno}: need objects with 'id' and 'contents'")
                yield str(obj["id"]), str(obj["contents"])


def read_queries(path) -> Iterator[tuple[str, str]]:
    """Yield (query_id, text) from a TSV query file."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or not parts[0]:
                raise DataError(f"{path}:{lineno}: expected 'qid<TAB>text'")
            yield parts[0], parts[1]
