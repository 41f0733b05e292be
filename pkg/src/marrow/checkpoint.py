"""Single-file model checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian float32 blobs in header order. The header carries the
model config, the tokenizer vocabulary (non-reserved tokens in id order) and
one entry per tensor with shape, byte offset and byte length; offsets are
relative to the end of the header. The loader validates the total file
length against the header before touching any blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .model import LoraAdapters, ModelConfig, ModelWeights
from .autodiff import Tensor
from .text import Vocabulary

_MAGIC = b"MARROWCK"
_VERSION = 1


@dataclass
class ModelCheckpoint:
    """Weights, optional adapters, config and vocabulary as one unit."""

    config: ModelConfig
    vocab: Vocabulary
    weights: ModelWeights
    adapters: LoraAdapters | None = None


def _named_blobs(ckpt: ModelCheckpoint) -> list[tuple[str, np.ndarray]]:
    blobs = [(name, t.data) for name, t in ckpt.weights.items()]
    if ckpt.adapters is not None:
        for name, (a, b) in sorted(ckpt.adapters.items()):
            blobs.append((f"lora.{name}.A", a.data))
            blobs.append((f"lora.{name}.B", b.data))
    return blobs


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    blobs = _named_blobs(ckpt)
    tensors = []
    offset = 0
    payloads = []
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format": "marrow-checkpoint",
        "version": _VERSION,
        "config": asdict(ckpt.config),
        "vocab": ckpt.vocab.tokens(),
        "lora": None if ckpt.adapters is None else
                {"rank": ckpt.adapters.rank, "alpha": ckpt.adapters.alpha,
                 "matrices": sorted(ckpt.adapters.names())},
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise DataError(f"{path}: not a marrow checkpoint (bad magic)")
    (head_len,) = struct.unpack("<Q", blob[8:16])
    body_start = 16 + head_len
    if body_start > len(blob):
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint header ({exc})") from exc
    if header.get("version") != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")

    total = sum(t["nbytes"] for t in header["tensors"])
    if len(blob) != body_start + total:
        raise DataError(f"{path}: payload length {len(blob) - body_start} does not match "
                        f"header total {total}")

    config = ModelConfig(**header["config"])
    vocab = Vocabulary(header["vocab"])
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = body_start + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        if arr.nbytes != entry["nbytes"]:
            raise DataError(f"{path}: tensor {entry['name']} shape/bytes mismatch")
        arrays[entry["name"]] = arr.astype(np.float32)

    weight_arrays = {n: a for n, a in arrays.items() if not n.startswith("lora.")}
    weights = ModelWeights(config, {n: Tensor(a, requires_grad=True) for n, a in weight_arrays.items()})

    adapters = None
    if header.get("lora"):
        rank, alpha = header["lora"]["rank"], header["lora"]["alpha"]
        pairs = {}
        for name in header["lora"]["matrices"]:
            try:
                a = arrays[f"lora.{name}.A"]
                b = arrays[f"lora.{name}.B"]
            except KeyError as exc:
                raise DataError(f"{path}: adapter blob missing for {name}") from exc
            pairs[name] = (Tensor(a, requires_grad=True), Tensor(b, requires_grad=True))
        adapters = LoraAdapters(rank, alpha, pairs)

    return ModelCheckpoint(config=config, vocab=vocab, weights=weights, adapters=adapters)
