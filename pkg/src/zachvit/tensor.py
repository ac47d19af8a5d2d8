"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is sized for a desk-scale model: operations validate shapes
eagerly, run in 64-bit throughout, and refuse to emit NaN/Inf silently.
Gradients are recorded on an explicit :class:`Tape`; replaying the tape in
reverse accumulates gradients into every ``requires_grad`` tensor reachable
from the loss. A tape is single-use.

Typical use::

    with Tape() as tape:
        loss = sum_all(mul(x, x))
    backward(loss, tape)
    # x.grad now holds 2*x
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class TapeError(RuntimeError):
    """Tape misuse: reuse after backward, loss not on tape, non-scalar loss."""


class NumericError(ArithmeticError):
    """An operation on finite inputs produced NaN or Inf."""


# Test hook: the self-check suite temporarily corrupts this factor to prove
# the gradient checker can detect a broken backward rule. Must stay 1.0.
_SOFTMAX_GRAD_SCALE = 1.0

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``data`` adopts the array it is given (converted to float64 if needed);
    ``grad`` appears only after a backward pass touched this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tape:
    """Ordered record of differentiable ops executed under this tape.

    Execution order is a topological order of the computation graph, so
    reverse replay propagates gradients correctly. Confine one tape to one
    thread for its lifetime.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._output_ids: set[int] = set()
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, pull: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, pull))
        self._output_ids.add(id(out))


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    Gradients add across fan-out. The tape is spent afterwards; calling
    backward on it again raises :class:`TapeError`.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape._spent:
        raise TapeError("tape already used for a backward pass")
    if id(loss) not in tape._output_ids:
        raise TapeError("loss was not produced under this tape")
    tape._spent = True
    loss.grad = np.ones_like(loss.data)
    for out, pull in reversed(tape._entries):
        if out.grad is not None:
            pull(out.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, *inputs: Tensor) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    return out


def _record(out: Tensor, pull: Callable[[np.ndarray], None]) -> None:
    stack = _tape_stack()
    if stack and out.requires_grad:
        stack[-1]._record(out, pull)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] and b [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, a, b)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    _record(out, pull)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    out = _result(a.data.T.copy(), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.T)

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a row-broadcast bias b [d] against a [m,d]."""
    broadcast = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not broadcast and a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = _result(a.data + b.data, a, b)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0) if broadcast else g)

    _record(out, pull)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = _result(a.data * b.data, a, b)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    _record(out, pull)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = _result(a.data * factor, a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * factor)

    _record(out, pull)
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * (a.data > 0.0))

    _record(out, pull)
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = _result(a.data * cdf, a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            _accum(a, g * (cdf + a.data * pdf))

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# structural


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = _result(a.data.reshape(shape).copy(), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    _record(out, pull)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows of nothing")
    width = parts[0].shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows needs matrices of equal width")
    out = _result(np.concatenate([p.data for p in parts], axis=0), *parts)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def pull(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[lo:hi])

    _record(out, pull)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols of nothing")
    height = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != height:
            raise ShapeError("concat_cols needs matrices of equal height")
    out = _result(np.concatenate([p.data for p in parts], axis=1), *parts)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def pull(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[:, lo:hi])

    _record(out, pull)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"bad row slice [{start}:{stop}] of {a.shape}")
    out = _result(a.data[start:stop].copy(), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[start:stop] = g
            _accum(a, buf)

    _record(out, pull)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"bad column slice [{start}:{stop}] of {a.shape}")
    out = _result(a.data[:, start:stop].copy(), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[:, start:stop] = g
            _accum(a, buf)

    _record(out, pull)
    return out


def permute_rows(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = list(perm)
    if a.data.ndim != 2 or sorted(perm) != list(range(a.shape[0])):
        raise ShapeError(f"bad row permutation of length {len(perm)} for {a.shape}")
    out = _result(a.data[perm].copy(), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[perm] = g
            _accum(a, buf)

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = _result(np.array(a.data.sum()), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g)))

    _record(out, pull)
    return out


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a [m,d] matrix, as a [d] vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a matrix, got {a.shape}")
    m = a.shape[0]
    out = _result(a.data.mean(axis=0), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / m, a.shape).copy())

    _record(out, pull)
    return out


def max_rows(a: Tensor) -> Tensor:
    """Columnwise max of a [m,d] matrix; gradient flows to the first argmax."""
    if a.data.ndim != 2:
        raise ShapeError(f"max_rows needs a matrix, got {a.shape}")
    idx = a.data.argmax(axis=0)
    out = _result(a.data[idx, np.arange(a.shape[1])].copy(), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx, np.arange(a.shape[1])] = g
            _accum(a, buf)

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# normalization and attention pieces


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, _SOFTMAX_GRAD_SCALE * y * (g - inner))

    _record(out, pull)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """log(softmax(a)) computed without forming the exponentials' ratio."""
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - log_z
    out = _result(y, a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    _record(out, pull)
    return out


def pick_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """One entry per row of a [m,n] matrix: out[i] = a[i, indices[i]]."""
    if a.data.ndim != 2:
        raise ShapeError(f"pick_rows needs a matrix, got {a.shape}")
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"need one index per row: {idx.shape} vs {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("pick_rows index out of range")
    rows = np.arange(a.shape[0])
    out = _result(a.data[rows, idx].copy(), a)

    def pull(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[rows, idx] = g
            _accum(a, buf)

    _record(out, pull)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization of a [m,d] matrix, then affine gain/bias [d]."""
    if eps <= 0.0:
        raise ShapeError("layer_norm eps must be positive")
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a matrix, got {a.shape}")
    d = a.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match row width")
    mean = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    out = _result(norm * gain.data + bias.data, a, gain, bias)

    def pull(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accum(gain, (g * norm).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if a.requires_grad:
            gn = g * gain.data
            # d/dx of (x - mean) * inv_std, rows independent
            term = gn - gn.mean(axis=1, keepdims=True) \
                - norm * (gn * norm).mean(axis=1, keepdims=True)
            _accum(a, term * inv_std)

    _record(out, pull)
    return out
