"""BM25 inverted-index retrieval.

Robertson BM25 with idf(t) = ln(1 + (N - df + 0.5)/(df + 0.5)), which is
nonnegative for every df <= N. Default parameters k1=0.9, b=0.4. Document
length counts every word token; postings exist only for in-vocabulary
terms, and reserved tokens are never indexed, so a query made of unknown
words matches nothing. Query terms contribute once per occurrence.

The on-disk format is: 8-byte magic, little-endian uint64 header length,
UTF-8 JSON header (doc count, average length, doc ids, doc lengths, and a
term table with per-term df/offset/length), then one blob per term of
LEB128 varint pairs (doc-index gap, term frequency), delta-encoded over
ascending internal doc indexes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import ContractError, DataError
from .text import Vocabulary, split_words

_MAGIC = b"MARROWIV"
_VERSION = 1

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4


@dataclass
class InvertedIndex:
    doc_ids: list[str]
    doc_lengths: list[int]
    avg_doc_length: float
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc_index, tf)] ascending

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)


def build_inverted_index(corpus: Iterable[tuple[str, str]], vocab: Vocabulary) -> InvertedIndex:
    """Index (doc_id, text) pairs; postings stay sorted because documents
    are ingested in ascending internal order."""
    doc_ids: list[str] = []
    doc_lengths: list[int] = []
    postings: dict[str, list[tuple[int, int]]] = {}
    seen: set[str] = set()
    for doc_id, text in corpus:
        if doc_id in seen:
            raise DataError(f"duplicate doc_id during indexing: {doc_id}")
        seen.add(doc_id)
        idx = len(doc_ids)
        words = split_words(text)
        doc_ids.append(doc_id)
        doc_lengths.append(len(words))
        counts: dict[str, int] = {}
        for w in words:
            if w in vocab:
                counts[w] = counts.get(w, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((idx, tf))
    if not doc_ids:
        raise DataError("cannot index an empty corpus")
    avg = sum(doc_lengths) / len(doc_lengths)
    return InvertedIndex(doc_ids, doc_lengths, avg, postings)


def bm25_search(query: str, index: InvertedIndex, k: int,
                k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> list[tuple[str, float]]:
    """Top-k documents by BM25 score, ties broken by doc_id ascending."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    n = index.n_docs
    scores: dict[int, float] = {}
    for term in split_words(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        df = len(plist)
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for doc_idx, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_lengths[doc_idx] / index.avg_doc_length)
            scores[doc_idx] = scores.get(doc_idx, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
    ranked = sorted(((index.doc_ids[i], s) for i, s in scores.items()),
                    key=lambda e: (-e[1], e[0]))
    return ranked[:k]


# --- binary persistence ---


def _write_varint(out: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varints(blob: bytes) -> Iterator[int]:
    value = 0
    shift = 0
    for byte in blob:
        value |= (byte & 0x7F) << shift
        if byte & 0x80:
            shift += 7
        else:
            yield value
            value = 0
            shift = 0
    if shift:
        raise DataError("truncated varint stream in postings blob")


def save_inverted_index(path, index: InvertedIndex) -> None:
    term_table = []
    blobs: list[bytes] = []
    offset = 0
    for term in sorted(index.postings):
        plist = index.postings[term]
        buf = bytearray()
        prev = 0
        for doc_idx, tf in plist:
            _write_varint(buf, doc_idx - prev)
            _write_varint(buf, tf)
            prev = doc_idx
        raw = bytes(buf)
        term_table.append({"t": term, "df": len(plist), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "marrow-inverted-index",
        "version": _VERSION,
        "n_docs": index.n_docs,
        "avg_doc_length": index.avg_doc_length,
        "doc_ids": index.doc_ids,
        "doc_lengths": index.doc_lengths,
        "terms": term_table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)


def load_inverted_index(path) -> InvertedIndex:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise DataError(f"{path}: not a marrow inverted index (bad magic)")
    (head_len,) = struct.unpack("<Q", blob[8:16])
    body = 16 + head_len
    if body > len(blob):
        raise DataError(f"{path}: truncated header")
    header = json.loads(blob[16:body].decode("utf-8"))
    if header.get("version") != _VERSION:
        raise DataError(f"{path}: unsupported index version {header.get('version')}")
    total = sum(t["nbytes"] for t in header["terms"])
    if len(blob) != body + total:
        raise DataError(f"{path}: postings length {len(blob) - body} does not match header {total}")
    postings: dict[str, list[tuple[int, int]]] = {}
    for entry in header["terms"]:
        raw = blob[body + entry["offset"]: body + entry["offset"] + entry["nbytes"]]
        values = list(_read_varints(raw))
        if len(values) != 2 * entry["df"]:
            raise DataError(f"{path}: term {entry['t']!r} has {len(values) // 2} postings, "
                            f"expected {entry['df']}")
        plist = []
        doc_idx = 0
        for i in range(0, len(values), 2):
            doc_idx += values[i]
            plist.append((doc_idx, values[i + 1]))
        postings[entry["t"]] = plist
    return InvertedIndex(header["doc_ids"], header["doc_lengths"],
                         header["avg_doc_length"], postings)
