"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Operations record onto an explicit :class:`Tape` (see :func:`tape`). Because
tensors are created in forward execution order, the tape's record order is
already a topological order, so the backward pass is a single reverse sweep
that visits each node exactly once.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tape",
    "add",
    "mul",
    "smul",
    "matmul",
    "transpose",
    "concat",
    "slice_rows",
    "slice_cols",
    "gather",
    "take_per_row",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "reciprocal",
    "leaky_relu",
    "elu",
    "layer_norm",
    "sum_",
    "mean_",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when an operation receives shape-incompatible inputs."""


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(input) into every recorded input tensor."""
        if loss.data.ndim != 0:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.accumulate(np.ones_like(loss.data))
        for out, backward in reversed(self._nodes):
            if out.grad is None:
                continue
            backward(out.grad)


_TAPES: list[Tape] = []


@contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape; ops executed inside are recorded on it."""
    t = Tape()
    _TAPES.append(t)
    try:
        yield t
    finally:
        _TAPES.pop()


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> None:
    if not _TAPES:
        return
    if not any(x.requires_grad for x in inputs):
        return
    out.requires_grad = True
    _TAPES[-1].record(out, backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-d bias added to every row of a."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0) if bias else g)

    _record(out, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    _record(out, (a, b), backward)
    return out


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    out = Tensor(a.data * c)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g * c)

    _record(out, (a,), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    _record(out, (a, b), backward)
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d input, got shape {a.shape}")
    out = Tensor(a.data.T.copy())

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g.T)

    _record(out, (a,), backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate(g[tuple(idx)])

    _record(out, parts, backward)
    return out


def _slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate(full)

    _record(out, (a,), backward)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    return _slice(_as_tensor(a), 0, start, stop)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-d input, got shape {a.shape}")
    return _slice(a, 1, start, stop)


def gather(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Row lookup (embedding gather)."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"gather: expected 2-d table, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table.accumulate(full)

    _record(out, (table,), backward)
    return out


def take_per_row(a: Tensor, cols: Sequence[int]) -> Tensor:
    """Pick one column per row: out[i] = a[i, cols[i]]."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: shapes {a.shape} and {cols.shape} do not align")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, cols])

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, cols] = g
            a.accumulate(full)

    _record(out, (a,), backward)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Rowwise softmax. -inf entries are legal and yield exact zeros."""
    a = _as_tensor(a)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # exp(-inf - max) underflow is intended
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate((g - dot) * y)

    _record(out, (a,), backward)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    y = np.exp(out.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g - y * g.sum(axis=axis, keepdims=True))

    _record(out, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g / a.data)

    _record(out, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g * out.data)

    _record(out, (a,), backward)
    return out


def reciprocal(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(1.0 / a.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(-g * out.data * out.data)

    _record(out, (a,), backward)
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g * np.where(a.data > 0, 1.0, slope))

    _record(out, (a,), backward)
    return out


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    neg = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out = Tensor(np.where(a.data > 0, a.data, neg))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g * np.where(a.data > 0, 1.0, neg + alpha))

    _record(out, (a,), backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            term1 = gx
            term2 = gx.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate((term1 - term2 - term3) * inv)

    _record(out, (x, gain, bias), backward)
    return out


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.full_like(a.data, g))
            else:
                a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    _record(out, (a,), backward)
    return out


def mean_(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.full_like(a.data, g / n))
            else:
                a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape) / n)

    _record(out, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _rel_error(a: float, f: float) -> float:
    if abs(a - f) < 1e-9:
        return 0.0
    return abs(a - f) / max(abs(a), abs(f))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of the scalar function f against central
    finite differences; returns the maximum relative error over the
    (sampled) coordinates of `inputs`."""
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.zero_grad()
    with tape() as t:
        loss = f()
    t.backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    worst = 0.0
    for x, a in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(f().data)
            flat[c] = orig - eps
            lo = float(f().data)
            flat[c] = orig
            fd = (hi - lo) / (2 * eps)
            worst = max(worst, _rel_error(float(a.reshape(-1)[c]), fd))
    return worst
