"""LLaMA-style causal micro-transformer with end-of-sequence pooling.

Architecture per layer: pre-RMS-norm, rotary multi-head attention with a
strict causal mask, residual add, pre-RMS-norm gated (SwiGLU) feed-forward,
residual add. A final RMS norm closes the stack. Projections carry no
biases. The encoder representation is the last-layer hidden state at an
appended end-of-sequence token, L2-normalized; the optional scalar head
projects that hidden state to one logit for pointwise scoring.

Low-rank adapters (B zero-initialized, so the adapted forward equals the
base forward at init) attach to the attention query/value projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError, LengthError, ShapeError
from .text import EOS_ID, TokenSequence

HEAD_NONE = "none"
HEAD_SCALAR = "scalar"

DEFAULT_LORA_TARGETS = ("wq", "wv")

_MASK_VALUE = -1e9
_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 256
    rope_theta: float = 10000.0
    lora_rank: int = 0
    lora_alpha: float = 8.0
    head: str = HEAD_NONE

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2 (one token plus eos)")
        if self.rope_theta <= 0 or self.lora_alpha <= 0:
            raise ConfigError("rope_theta and lora_alpha must be positive")
        if self.lora_rank < 0:
            raise ConfigError(f"lora_rank must be nonnegative, got {self.lora_rank}")
        if self.head not in (HEAD_NONE, HEAD_SCALAR):
            raise ConfigError(f"unknown head kind: {self.head!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def _matrix_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, in canonical (checkpoint) order."""
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_gate"] = (d, ff)
        shapes[p + "w_up"] = (d, ff)
        shapes[p + "w_down"] = (ff, d)
    shapes["final_norm"] = (d,)
    if config.head == HEAD_SCALAR:
        shapes["head_w"] = (d, 1)
        shapes["head_b"] = (1, 1)
    return shapes


class ModelWeights:
    """Named parameter tensors; shapes fixed by the owning ModelConfig."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        expected = _matrix_shapes(config)
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ContractError(f"weight names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise ShapeError(f"{name}: expected shape {expected[name]}, got {t.shape}")
            if not np.isfinite(t.data).all():
                raise ContractError(f"{name} contains non-finite values")
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def n_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {
            n: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype)
            for n, t in self._tensors.items()
        })


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Scaled-normal (std 0.02) init for matrices, ones for norm gains."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _matrix_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        elif name == "head_b":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, _INIT_STD, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return ModelWeights(config, tensors)


class LoraAdapters:
    """Low-rank deltas for selected projection matrices.

    Per adapted matrix W [in x out]: A is [rank x in], B is [out x rank],
    and the effective update is scaling * (B @ A) applied in W's layout,
    i.e. forward adds scaling * x @ A.T @ B.T. B starts at zero.
    """

    def __init__(self, rank: int, alpha: float, pairs: Mapping[str, tuple[Tensor, Tensor]]):
        if rank <= 0:
            raise ContractError(f"adapter rank must be positive, got {rank}")
        self.rank = rank
        self.alpha = float(alpha)
        self.scaling = float(alpha) / rank
        self._pairs = dict(pairs)

    @classmethod
    def create(cls, config: ModelConfig, seed: int,
               targets: Sequence[str] = DEFAULT_LORA_TARGETS,
               dtype=np.float32) -> "LoraAdapters":
        if config.lora_rank <= 0:
            raise ConfigError("lora_rank is 0; adapters are disabled in this config")
        rng = np.random.default_rng(seed)
        shapes = _matrix_shapes(config)
        pairs: dict[str, tuple[Tensor, Tensor]] = {}
        for name, shape in shapes.items():
            if len(shape) == 2 and name.split(".")[-1] in targets:
                d_in, d_out = shape
                a = Tensor(rng.normal(0.0, _INIT_STD, size=(config.lora_rank, d_in)),
                           requires_grad=True, dtype=dtype)
                b = Tensor(np.zeros((d_out, config.lora_rank)), requires_grad=True, dtype=dtype)
                pairs[name] = (a, b)
        return cls(config.lora_rank, config.lora_alpha, pairs)

    def __contains__(self, name: str) -> bool:
        return name in self._pairs

    def __getitem__(self, name: str) -> tuple[Tensor, Tensor]:
        return self._pairs[name]

    def names(self) -> list[str]:
        return list(self._pairs)

    def items(self) -> Iterable[tuple[str, tuple[Tensor, Tensor]]]:
        return self._pairs.items()

    def n_parameters(self) -> int:
        return sum(a.size + b.size for a, b in self._pairs.values())

    def astype(self, dtype) -> "LoraAdapters":
        return LoraAdapters(self.rank, self.alpha, {
            n: (Tensor(a.data, requires_grad=a.requires_grad, dtype=dtype),
                Tensor(b.data, requires_grad=b.requires_grad, dtype=dtype))
            for n, (a, b) in self._pairs.items()
        })


@lru_cache(maxsize=64)
def _rope_tables(seq_len: int, d_head: int, theta: float, dtype_name: str):
    """cos/sin tables [seq_len x d_head]; each frequency spans both halves."""
    inv_freq = theta ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1)
    return cos.astype(dtype_name), sin.astype(dtype_name)


@lru_cache(maxsize=64)
def _causal_mask(seq_len: int, dtype_name: str) -> np.ndarray:
    mask = np.triu(np.full((seq_len, seq_len), _MASK_VALUE), k=1)
    return mask.astype(dtype_name)


def _token_ids(tokens) -> list[int]:
    return list(tokens.ids) if isinstance(tokens, TokenSequence) else list(tokens)


def _project(x: Tensor, name: str, weights: ModelWeights,
             adapters: LoraAdapters | None, tape: Tape | None) -> Tensor:
    out = ad.matmul(x, weights[name], tape)
    if adapters is not None and name in adapters:
        a, b = adapters[name]
        delta = ad.matmul(ad.matmul(x, ad.transpose(a, tape), tape),
                          ad.transpose(b, tape), tape)
        out = ad.add(out, ad.scale(delta, adapters.scaling, tape), tape)
    return out


def causal_forward(tokens, weights: ModelWeights,
                   adapters: LoraAdapters | None = None,
                   tape: Tape | None = None) -> Tensor:
    """Hidden states [seq_len x d_model]; position i sees only tokens <= i."""
    config = weights.config
    ids = _token_ids(tokens)
    if not ids:
        raise ContractError("causal_forward needs at least one token")
    if len(ids) > config.max_seq_len:
        raise LengthError(f"sequence length {len(ids)} exceeds max_seq_len {config.max_seq_len}")
    if min(ids) < 0 or max(ids) >= config.vocab_size:
        raise ContractError(f"token id out of vocabulary range [0, {config.vocab_size})")

    seq_len = len(ids)
    dh = config.d_head
    dtype = weights["embed"].data.dtype
    cos, sin = _rope_tables(seq_len, dh, config.rope_theta, dtype.name)
    mask = ad.Tensor(_causal_mask(seq_len, dtype.name), dtype=dtype)
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    x = ad.gather_rows(weights["embed"], ids, tape)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        h = ad.rms_norm(x, weights[p + "attn_norm"], tape=tape)
        q = _project(h, p + "wq", weights, adapters, tape)
        k = _project(h, p + "wk", weights, adapters, tape)
        v = _project(h, p + "wv", weights, adapters, tape)
        head_outs = []
        for hd in range(config.n_heads):
            lo, hi = hd * dh, (hd + 1) * dh
            qh = ad.rope(ad.slice_cols(q, lo, hi, tape), cos, sin, tape)
            kh = ad.rope(ad.slice_cols(k, lo, hi, tape), cos, sin, tape)
            vh = ad.slice_cols(v, lo, hi, tape)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh, tape), tape), inv_sqrt_dh, tape)
            attn = ad.softmax_rows(ad.add(scores, mask, tape), tape)
            head_outs.append(ad.matmul(attn, vh, tape))
        attn_out = _project(ad.concat_cols(head_outs, tape), p + "wo", weights, adapters, tape)
        x = ad.add(x, attn_out, tape)

        h2 = ad.rms_norm(x, weights[p + "ffn_norm"], tape=tape)
        gate = ad.silu(_project(h2, p + "w_gate", weights, adapters, tape), tape)
        up = _project(h2, p + "w_up", weights, adapters, tape)
        ffn = _project(ad.mul(gate, up, tape), p + "w_down", weights, adapters, tape)
        x = ad.add(x, ffn, tape)

    return ad.rms_norm(x, weights["final_norm"], tape=tape)


def encode_text(tokens, weights: ModelWeights,
                adapters: LoraAdapters | None = None,
                tape: Tape | None = None) -> Tensor:
    """Unit-norm sequence embedding [1 x d_model] from the eos position.

    Appends the end-of-sequence token (input must not already carry it;
    empty input encodes eos alone). If the input would overflow the context
    after the append it is first cut to max_seq_len - 1 tokens.
    """
    config = weights.config
    ids = _token_ids(tokens)
    if ids and ids[-1] == EOS_ID:
        raise ContractError("input already ends with eos; encode_text appends it")
    ids = ids[: config.max_seq_len - 1] + [EOS_ID]
    hidden = causal_forward(ids, weights, adapters, tape)
    last = ad.slice_rows(hidden, len(ids) - 1, len(ids), tape)
    return ad.l2_normalize_rows(last, tape)


def score_head(tokens, weights: ModelWeights,
               adapters: LoraAdapters | None = None,
               tape: Tape | None = None) -> Tensor:
    """Scalar relevance logit [1 x 1]: <head_w, last hidden state> + bias.

    The caller's template must have terminated the input with eos already.
    """
    config = weights.config
    if config.head != HEAD_SCALAR:
        raise ConfigError("model config has no scalar head")
    ids = _token_ids(tokens)
    if not ids or ids[-1] != EOS_ID:
        raise ContractError("score_head expects an eos-terminated input")
    hidden = causal_forward(ids, weights, adapters, tape)
    last = ad.slice_rows(hidden, len(ids) - 1, len(ids), tape)
    return ad.add(ad.matmul(last, weights["head_w"], tape), weights["head_b"], tape)


def merge_lora(weights: ModelWeights, adapters: LoraAdapters) -> ModelWeights:
    """Fold adapters into a plain weight set: W' = W + scaling * (B A)."""
    merged: dict[str, Tensor] = {}
    for name, t in weights.items():
        if name in adapters:
            a, b = adapters[name]
            d_in, d_out = t.shape
            if a.shape[0] != b.shape[1]:
                raise ContractError(f"{name}: adapter ranks differ, A {a.shape} vs B {b.shape}")
            if a.shape[1] != d_in or b.shape[0] != d_out:
                raise ContractError(f"{name}: adapter shapes {a.shape}/{b.shape} do not fit W {t.shape}")
            # (B @ A) is [out x in]; transpose into this module's [in x out] layout.
            delta = (adapters.scaling * (b.data @ a.data)).T.astype(t.data.dtype)
            merged[name] = Tensor(t.data + delta, requires_grad=t.requires_grad, dtype=t.data.dtype)
        else:
            merged[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype)
    return ModelWeights(weights.config, merged)


def trainable_tensors(weights: ModelWeights,
                      adapters: LoraAdapters | None) -> dict[str, Tensor]:
    """Parameters the optimizer updates.

    Full fine-tune: every weight tensor. Adapter mode: the A/B pairs plus
    the scalar head when present (the head is freshly initialized, it has
    no pretrained value to preserve). Flags on the tensors are set to
    match, so gradients stop flowing into frozen base weights.
    """
    params: dict[str, Tensor] = {}
    if adapters is None:
        for name, t in weights.items():
            t.requires_grad = True
            params[name] = t
        return params
    for name, t in weights.items():
        t.requires_grad = False
    for name, (a, b) in adapters.items():
        a.requires_grad = True
        b.requires_grad = True
        params[f"lora.{name}.A"] = a
        params[f"lora.{name}.B"] = b
    if weights.config.head == HEAD_SCALAR:
        for name in ("head_w", "head_b"):
            weights[name].requires_grad = True
            params[name] = weights[name]
    return params
