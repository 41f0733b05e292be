"""Exact flat-index vector search: brute-force top-k by dot product.

Scores are computed over fixed 4096-row chunks, so the arithmetic per row
is identical whether chunks run sequentially or across workers; a
deterministic merge on (score desc, doc_id asc) then makes the output
independent of the worker count. No approximation anywhere: results always
match an exhaustive sort.

On-disk format: 8-byte magic, little-endian uint64 header length, UTF-8
JSON header (n, d, doc ids), then the raw little-endian float32 row matrix.
Embeddings can also be imported from JSONL lines {"id": ..., "vector": [...]}.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .parallel import ordered_map, resolve_workers

logger = logging.getLogger(__name__)

_MAGIC = b"MARROWFX"
_VERSION = 1
_CHUNK = 4096
_NORM_TOL = 1e-4


@dataclass
class FlatIndex:
    doc_ids: list[str]
    matrix: np.ndarray  # [n_docs x dim] float32, unit-norm rows

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1]) if self.matrix.ndim == 2 else 0


def build_flat_index(embeddings: Iterable[tuple[str, np.ndarray]],
                     dim: int | None = None) -> FlatIndex:
    """Validate ids, dimensions and unit norms, then freeze the matrix.

    dim is only needed to type an empty index.
    """
    ids: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    for doc_id, vec in embeddings:
        arr = np.asarray(vec, dtype=np.float32).reshape(-1)
        if doc_id in seen:
            raise DataError(f"duplicate embedding id: {doc_id}")
        seen.add(doc_id)
        if rows and arr.shape[0] != rows[0].shape[0]:
            raise ShapeError(f"embedding {doc_id} has dimension {arr.shape[0]}, "
                             f"expected {rows[0].shape[0]}")
        norm = float(np.linalg.norm(arr))
        if abs(norm - 1.0) > _NORM_TOL:
            raise DataError(f"embedding {doc_id} is not unit-norm (|v| = {norm:.6f})")
        ids.append(doc_id)
        rows.append(arr)
    if not rows:
        return FlatIndex([], np.zeros((0, dim or 0), dtype=np.float32))
    return FlatIndex(ids, np.ascontiguousarray(np.stack(rows)))


def _chunk_scores(index: FlatIndex, query: np.ndarray) -> np.ndarray:
    """Dot products against every row, computed chunk by chunk.

    The chunk size is constant so the floating-point result is the same no
    matter how chunks are assigned to workers.
    """
    n = index.n_docs
    out = np.empty(n, dtype=np.float32)
    for start in range(0, n, _CHUNK):
        end = min(start + _CHUNK, n)
        out[start:end] = index.matrix[start:end] @ query
    return out


def flat_search(query: np.ndarray, index: FlatIndex, k: int) -> list[tuple[str, float]]:
    """Exact top-k by dot product, ties broken by doc_id ascending.

    Asking for more results than the index holds returns everything.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if index.n_docs == 0:
        return []
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != index.dim:
        raise ShapeError(f"query dimension {q.shape[0]} does not match index dimension {index.dim}")
    scores = _chunk_scores(index, q)
    n = index.n_docs
    k = min(k, n)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    ranked = sorted(((index.doc_ids[i], float(scores[i])) for i in cand),
                    key=lambda e: (-e[1], e[0]))
    return ranked[:k]


def batch_search(queries: Sequence[np.ndarray], index: FlatIndex, k: int,
                 workers: int | None = None) -> list[list[tuple[str, float]]]:
    """flat_search per query, worker-parallel with order-preserving merge."""
    t0 = time.perf_counter()
    results = ordered_map(lambda q: flat_search(q, index, k), list(queries), workers)
    dt = time.perf_counter() - t0
    if queries and dt > 0:
        logger.info("batch_search: %d queries in %.3fs (%.1f q/s, workers<=%d)",
                    len(queries), dt, len(queries) / dt, resolve_workers(workers))
    return results


# --- persistence ---


def save_flat_index(path, index: FlatIndex) -> None:
    header = {
        "format": "marrow-flat-index",
        "version": _VERSION,
        "n_docs": index.n_docs,
        "dim": index.dim,
        "doc_ids": index.doc_ids,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())


def load_flat_index(path, validate_norms: bool = False) -> FlatIndex:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise DataError(f"{path}: not a marrow flat index (bad magic)")
    (head_len,) = struct.unpack("<Q", blob[8:16])
    body = 16 + head_len
    if body > len(blob):
        raise DataError(f"{path}: truncated header")
    header = json.loads(blob[16:body].decode("utf-8"))
    if header.get("version") != _VERSION:
        raise DataError(f"{path}: unsupported index version {header.get('version')}")
    n, d = header["n_docs"], header["dim"]
    expected = n * d * 4
    if len(blob) != body + expected:
        raise DataError(f"{path}: matrix payload is {len(blob) - body} bytes, expected {expected}")
    matrix = np.frombuffer(blob[body:], dtype="<f4").reshape(n, d).astype(np.float32)
    if len(header["doc_ids"]) != n:
        raise DataError(f"{path}: id table length {len(header['doc_ids'])} != n_docs {n}")
    index = FlatIndex(header["doc_ids"], np.ascontiguousarray(matrix))
    if validate_norms and n:
        norms = np.linalg.norm(index.matrix, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > _NORM_TOL)
        if bad.size:
            raise DataError(f"{path}: row {index.doc_ids[int(bad[0])]} is not unit-norm "
                            f"(|v| = {float(norms[bad[0]]):.6f})")
    return index


def read_embeddings_jsonl(path) -> Iterable[tuple[str, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "id" not in obj or "vector" not in obj:
                raise DataError(f"{path}:{lineno}: need objects with 'id' and 'vector'")
            yield str(obj["id"]), np.asarray(obj["vector"], dtype=np.float32)
