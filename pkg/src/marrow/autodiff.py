"""Dense float tensors plus a reverse-mode differentiation tape.

The operation set is exactly what a small causal transformer and two
contrastive losses need: 2-D matmul, row-wise softmax / log-softmax, RMS
normalization, SiLU, rotary pairing, row/column slicing and stacking, and
scalar reductions. Arrays are contiguous row-major float32; float64 is
reserved for finite-difference gradient checks. There is no broadcasting
beyond the row-wise vector ops that take an explicit per-column parameter.

A Tape records one entry per produced tensor, in execution order, so the
list is already topologically sorted and a single reverse sweep visits each
node exactly once. A Tape is single-threaded; independent Tapes may run
concurrently. Tensors that do not require gradients are treated as
immutable constants and can be shared across threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError


class Tensor:
    """Contiguous row-major float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


def _wrap(arr: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
    out.requires_grad = requires_grad
    out.grad = None
    return out


def _check_dtypes(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ContractError(f"mixed dtypes on one graph: {dt} vs {t.data.dtype}")


class Tape:
    """Execution-ordered record of differentiable operations.

    Ops append (output, inputs, rule) as they run, so the record list is
    topologically sorted by construction. The reverse sweep in backward()
    pops each output's accumulated gradient exactly once.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self._records.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
        if loss.data.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not any(out is loss for out, _, _ in self._records):
            raise ContractError("loss tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, rule in reversed(self._records):
            g = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for tensor, piece in zip(inputs, rule(g)):
                if piece is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + piece
                else:
                    grads[key] = piece
                    holders[key] = tensor
        for key, tensor in holders.items():
            if tensor.requires_grad:
                g = grads[key]
                tensor.grad = g if tensor.grad is None else tensor.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


# --- primitive operations ---


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    _check_dtypes(a, b)
    out = _wrap(a.data + b.data, a.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:
        na, nb = a.requires_grad, b.requires_grad
        tape.record(out, (a, b), lambda g: (g if na else None, g if nb else None))
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    _check_dtypes(a, b)
    out = _wrap(a.data * b.data, a.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:
        na, nb = a.requires_grad, b.requires_grad
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g * bd if na else None, g * ad if nb else None))
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)
    out = _wrap(a.data * a.data.dtype.type(c), a.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record(out, (a,), lambda g: (g * c,))
    return out


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """C = A @ B for 2-D operands; backward is dA = g Bᵀ, dB = Aᵀ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    _check_dtypes(a, b)
    out = _wrap(a.data @ b.data, a.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:
        na, nb = a.requires_grad, b.requires_grad
        ad, bd = a.data, b.data
        tape.record(out, (a, b),
                    lambda g: (g @ bd.T if na else None, ad.T @ g if nb else None))
    return out


def transpose(a: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    out = _wrap(np.ascontiguousarray(a.data.T), a.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))
    return out


def gather_rows(table: Tensor, ids: Sequence[int], tape: Tape | None = None) -> Tensor:
    """Select rows of a 2-D table; gradients accumulate back per row id."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("gather_rows needs a non-empty 1-D id list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ContractError(f"row id out of range [0, {table.shape[0]}): {int(idx.min())}..{int(idx.max())}")
    out = _wrap(np.ascontiguousarray(table.data[idx]), table.requires_grad)
    if tape is not None and out.requires_grad:
        shape, dt = table.shape, table.data.dtype

        def rule(g):
            dtab = np.zeros(shape, dtype=dt)
            np.add.at(dtab, idx, g)
            return (dtab,)

        tape.record(out, (table,), rule)
    return out


def softmax_rows(m: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {m.shape}")
    if np.isnan(m.data).any():
        raise NumericError("softmax_rows input contains NaN")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = _wrap(s, m.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record(out, (m,),
                    lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))
    return out


def log_softmax_rows(m: Tensor, tape: Tape | None = None) -> Tensor:
    if m.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D tensor, got {m.shape}")
    if np.isnan(m.data).any():
        raise NumericError("log_softmax_rows input contains NaN")
    z = m.data - m.data.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _wrap(ls, m.requires_grad)
    if tape is not None and out.requires_grad:
        sm = np.exp(ls)
        tape.record(out, (m,),
                    lambda g: (g - sm * g.sum(axis=1, keepdims=True),))
    return out


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Per row: x * gamma / sqrt(mean(x^2) + eps)."""
    if x.data.ndim != 2 or gamma.data.ndim != 1 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"rms_norm shapes incompatible: {x.shape} with gamma {gamma.shape}")
    if eps <= 0:
        raise ContractError(f"rms_norm eps must be positive, got {eps}")
    _check_dtypes(x, gamma)
    d = x.shape[1]
    r = np.sqrt((x.data * x.data).mean(axis=1, keepdims=True) + x.data.dtype.type(eps))
    y = x.data * gamma.data / r
    out = _wrap(y, x.requires_grad or gamma.requires_grad)
    if tape is not None and out.requires_grad:
        nx, ng = x.requires_grad, gamma.requires_grad
        xd, gd = x.data, gamma.data

        def rule(g):
            dx = None
            if nx:
                inner = (g * gd * xd).sum(axis=1, keepdims=True)
                dx = g * gd / r - xd * inner / (d * r ** 3)
            dgamma = (g * xd / r).sum(axis=0) if ng else None
            return (dx, dgamma)

        tape.record(out, (x, gamma), rule)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-x))
        ex = np.exp(np.minimum(x, 0.0))
        neg = ex / (1.0 + ex)
    return np.where(x >= 0, pos, neg).astype(x.dtype)


def silu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """x * sigmoid(x); derivative sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    s = _sigmoid(x.data)
    out = _wrap(x.data * s, x.requires_grad)
    if tape is not None and out.requires_grad:
        xd = x.data
        tape.record(out, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))
    return out


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Rotary pairing: out = x*cos + rot(x)*sin with half-split pairing.

    rot concatenates (-second_half, first_half) along columns; cos/sin are
    position-dependent constants of the same shape as x.
    """
    if x.data.ndim != 2 or x.shape[1] % 2 != 0:
        raise ShapeError(f"rope needs a 2-D tensor with even columns, got {x.shape}")
    if cos.shape != x.shape or sin.shape != x.shape:
        raise ShapeError(f"rope table shape {cos.shape} does not match input {x.shape}")
    h = x.shape[1] // 2
    xd = x.data
    rot = np.concatenate([-xd[:, h:], xd[:, :h]], axis=1)
    out = _wrap(xd * cos + rot * sin, x.requires_grad)
    if tape is not None and out.requires_grad:

        def rule(g):
            gs = g * sin
            return (g * cos + np.concatenate([gs[:, h:], -gs[:, :h]], axis=1),)

        tape.record(out, (x,), rule)
    return out


def slice_rows(x: Tensor, lo: int, hi: int, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[0]):
        raise ShapeError(f"slice_rows [{lo}:{hi}] invalid for shape {x.shape}")
    out = _wrap(np.ascontiguousarray(x.data[lo:hi]), x.requires_grad)
    if tape is not None and out.requires_grad:
        shape, dt = x.shape, x.data.dtype

        def rule(g):
            dx = np.zeros(shape, dtype=dt)
            dx[lo:hi] = g
            return (dx,)

        tape.record(out, (x,), rule)
    return out


def slice_cols(x: Tensor, lo: int, hi: int, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] invalid for shape {x.shape}")
    out = _wrap(np.ascontiguousarray(x.data[:, lo:hi]), x.requires_grad)
    if tape is not None and out.requires_grad:
        shape, dt = x.shape, x.data.dtype

        def rule(g):
            dx = np.zeros(shape, dtype=dt)
            dx[:, lo:hi] = g
            return (dx,)

        tape.record(out, (x,), rule)
    return out


def _concat(xs: Sequence[Tensor], axis: int, tape: Tape | None) -> Tensor:
    if not xs:
        raise ContractError("concat needs at least one tensor")
    other = 1 - axis
    for t in xs:
        if t.data.ndim != 2 or t.shape[other] != xs[0].shape[other]:
            raise ShapeError(f"concat axis={axis} mismatch: {[t.shape for t in xs]}")
    _check_dtypes(*xs)
    out = _wrap(np.concatenate([t.data for t in xs], axis=axis),
                any(t.requires_grad for t in xs))
    if tape is not None and out.requires_grad:
        sizes = [t.shape[axis] for t in xs]
        needs = [t.requires_grad for t in xs]
        offsets = np.cumsum([0] + sizes)

        def rule(g):
            pieces = []
            for i, need in enumerate(needs):
                if not need:
                    pieces.append(None)
                elif axis == 0:
                    pieces.append(g[offsets[i]:offsets[i + 1]])
                else:
                    pieces.append(g[:, offsets[i]:offsets[i + 1]])
            return tuple(pieces)

        tape.record(out, tuple(xs), rule)
    return out


def concat_rows(xs: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    return _concat(xs, 0, tape)


def concat_cols(xs: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    return _concat(xs, 1, tape)


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(x.data.sum(dtype=x.data.dtype).reshape(()), x.requires_grad)
    if tape is not None and out.requires_grad:
        shape, dt = x.shape, x.data.dtype
        tape.record(out, (x,), lambda g: (np.full(shape, g, dtype=dt),))
    return out


def mean_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    n = x.data.size
    out = _wrap((x.data.sum(dtype=x.data.dtype) / n).reshape(()), x.requires_grad)
    if tape is not None and out.requires_grad:
        shape, dt = x.shape, x.data.dtype
        tape.record(out, (x,), lambda g: (np.full(shape, g / n, dtype=dt),))
    return out


def pick_per_row(x: Tensor, cols: Sequence[int], tape: Tape | None = None) -> Tensor:
    """out[i] = x[i, cols[i]]; the scatter in backward hits each row once."""
    if x.data.ndim != 2:
        raise ShapeError(f"pick_per_row needs a 2-D tensor, got {x.shape}")
    idx = np.asarray(cols, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"need one column per row: {idx.shape} vs {x.shape[0]} rows")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ContractError(f"column index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    out = _wrap(np.ascontiguousarray(x.data[rows, idx]), x.requires_grad)
    if tape is not None and out.requires_grad:
        shape, dt = x.shape, x.data.dtype

        def rule(g):
            dx = np.zeros(shape, dtype=dt)
            dx[rows, idx] = g
            return (dx,)

        tape.record(out, (x,), rule)
    return out


def l2_normalize_rows(x: Tensor, tape: Tape | None = None) -> Tensor:
    """y = x / ||x|| per row; backward projects out the radial component."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs a 2-D tensor, got {x.shape}")
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if (n == 0).any():
        raise NumericError("cannot normalize a zero row")
    y = x.data / n
    out = _wrap(y, x.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record(out, (x,),
                    lambda g: ((g - y * (g * y).sum(axis=1, keepdims=True)) / n,))
    return out


# --- finite-difference checking ---


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. x, in place.

    x must be float64: at float32 the difference quotient is dominated by
    rounding noise and the check is meaningless.
    """
    if x.dtype != np.float64:
        raise ContractError(f"numeric_gradient needs float64 storage, got {x.dtype}")
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(1, |a|, |n|), reduced to the worst entry.

    The unit floor turns the ratio into an absolute tolerance for entries
    whose gradient magnitude is below 1, where a pure ratio would amplify
    finite-difference noise.
    """
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
