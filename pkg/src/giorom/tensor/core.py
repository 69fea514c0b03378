"""Dense float64 tensors with a reverse-mode tape.

Operations are recorded only while a :class:`Tape` is active (see
:func:`recording`) and at least one input requires a gradient. Outside a tape
every op is a plain numpy computation, which is what inference uses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numba
import numpy as np

from ._gelu import gelu_kernel


class Tensor:
    """Immutable float64 array that can take part in a reverse sweep."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss``; leaves ``.grad`` on every reached tensor."""
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad = inp.grad + gi

    def clear(self) -> None:
        for node in self.nodes:
            node.out.grad = None
            for inp in node.inputs:
                inp.grad = None
        self.nodes.clear()


_ACTIVE: list[Tape] = []


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Activate a tape for the duration of the block."""
    tape = Tape() if tape is None else tape
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, backward)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    # Trailing-axis alignment only: rank-k operand must match the last k axes.
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    tail = big.shape[big.ndim - small.ndim:]
    if any(s not in (1, t) for s, t in zip(small.shape, tail)):
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) Gaussian error linear unit."""
    xd = np.ascontiguousarray(x.data, dtype=np.float64)
    with np.errstate(over="ignore"):
        e = np.multiply(xd, xd)
    e *= -0.5
    np.exp(e, out=e)
    out = np.empty_like(xd)
    der = np.empty_like(xd)
    gelu_kernel(xd.reshape(-1), e.reshape(-1), out.reshape(-1), der.reshape(-1))
    return _make(out, (x,), lambda g: (g * der,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[*, in] @ w[in, out]``; leading axes of ``x`` are batch axes."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: input shape {x.shape} incompatible with weight shape {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        return gx, gw

    return _make(out, (x, w), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W + b`` over the last axis of ``x``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b is None:
        return matmul(x, w)
    if b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ValueError(f"linear: bias shape {b.shape} incompatible with weight shape {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    out += b.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(*xd.shape[:-1], wd.shape[1]), (x, w, b), backward)


def gathered_linear(parts: Sequence[tuple], w: Tensor, b: Tensor) -> Tensor:
    """``concat([x_k[index_k] for k]) @ w + b`` without building the concatenation.

    Each part is ``(x_k, index_k)`` with ``index_k`` None for "already aligned";
    part ``k`` uses the next ``x_k.shape[-1]`` rows of ``w``. The product runs
    at the row count of ``x_k`` and is gathered afterwards.
    """
    w = _as_tensor(w)
    tensors, indices, slices = [], [], []
    off = 0
    rows = None
    for x, index in parts:
        x = _as_tensor(x)
        width = x.shape[-1]
        tensors.append(x)
        idx = None if index is None else np.asarray(index, dtype=np.int64)
        indices.append(idx)
        slices.append(slice(off, off + width))
        off += width
        n = x.shape[0] if idx is None else idx.shape[0]
        if rows is not None and n != rows:
            raise ValueError(f"gathered_linear: part rows {n} != {rows}")
        rows = n
    if off != w.shape[0]:
        raise ValueError(f"gathered_linear: parts span {off} inputs, weight shape {w.shape}")
    wd = w.data
    out = np.empty((rows, wd.shape[1]))
    out[:] = b.data
    for x, idx, sl in zip(tensors, indices, slices):
        y = x.data @ wd[sl]
        out += y if idx is None else y[idx]

    def backward(g):
        gw = np.zeros_like(wd) if w.requires_grad else None
        grads = []
        for x, idx, sl in zip(tensors, indices, slices):
            gy = g if idx is None else scatter_rows(g, idx, x.shape[0])
            if gw is not None:
                gw[sl] = x.data.T @ gy
            grads.append(gy @ wd[sl].T if x.requires_grad else None)
        return (*grads, gw, g.sum(axis=0))

    return _make(out, (*tensors, w, b), backward)


# ----------------------------------------------------------------------------
# shape and indexing
# ----------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing. Fancy indexing goes through :func:`take`."""
    src = x.shape
    out = x.data[key]

    def backward(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return _make(np.array(out), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _make(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows: ``x[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    tail = x.shape[1:]

    def backward(g):
        return (scatter_rows(g, index, n),)

    return _make(x.data[index], (x,), backward)


@numba.njit(cache=True)
def _scatter_add(g, index, out):
    for k in range(index.shape[0]):
        row = index[k]
        for j in range(g.shape[1]):
            out[row, j] += g[k, j]


def scatter_rows(g: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """``out[index[k]] += g[k]``, accumulated in row order so results are reproducible."""
    out = np.zeros((n,) + g.shape[1:])
    if index.size == 0:
        return out
    if index.min() < 0 or index.max() >= n:
        raise IndexError(f"scatter index out of range [0, {n})")
    width = int(np.prod(g.shape[1:], dtype=np.int64))
    _scatter_add(np.ascontiguousarray(g, dtype=np.float64).reshape(len(index), width),
                 np.ascontiguousarray(index, dtype=np.int64), out.reshape(n, width))
    return out


def segment_sum(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets.

    ``segment_ids`` must be sorted ascending; the sum within each bucket runs in
    row order, so results are bitwise reproducible.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.size and np.any(ids[1:] < ids[:-1]):
        raise ValueError("segment_sum: segment_ids must be sorted")
    out = scatter_rows(x.data, ids, num_segments)
    return _make(out, (x,), lambda g: (g[ids],))


def segment_mean(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean over each bucket; empty buckets yield zeros."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    total = segment_sum(x, ids, num_segments)
    return mul(total, Tensor(inv.reshape((-1,) + (1,) * (x.ndim - 1))))


# ----------------------------------------------------------------------------
# reductions and losses
# ----------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _make(np.array([x.data.sum()]), (x,), lambda g: (np.full(src, g[0]),))


def mean_all(x: Tensor) -> Tensor:
    src = x.shape
    n = x.size
    return _make(np.array([x.data.mean()]), (x,), lambda g: (np.full(src, g[0] / n),))


def mse(pred: Tensor, target) -> Tensor:
    """Mean over every element of the squared difference."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: prediction shape {pred.shape} != target shape {target.shape}")
    return mean_all(square(sub(pred, target)))
