"""Named parameter storage, gradients, checkpoints and the Adam optimizer."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import Tape, Tensor, active_tape

CHECKPOINT_MAGIC = b"GPRM"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered ``name -> Tensor`` map with one gradient slot per parameter."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def set(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.shape:
            raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
        t.data[...] = value

    def subset(self, names) -> "ParamStore":
        """A store sharing the named tensors (not copies) with fresh gradient slots."""
        out = ParamStore()
        for n in names:
            out._params[n] = self._params[n]
            out.grads[n] = np.zeros_like(self._params[n].data)
        return out

    def zero_grad(self) -> None:
        for name, t in self._params.items():
            self.grads[name] = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}


def gradient(loss: Tensor, params: ParamStore, tape: Tape | None = None) -> None:
    """Fill ``params.grads`` with d(loss)/d(param) and clear the tape."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("gradient: loss was not produced under an active tape")
    if loss.size != 1:
        raise ValueError(f"gradient: loss must be a scalar, got shape {loss.shape}")
    for t in params._params.values():
        t.grad = None
    tape.backward(loss)
    for name, t in params._params.items():
        params.grads[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    tape.clear()
    for t in params._params.values():
        t.grad = None


class Adam:
    """Adam with a per-step multiplicative learning-rate decay.

    On construction every parameter is moved into one flat buffer (the
    tensors keep views into it), so a step is a handful of vector passes.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, gamma: float = 1.0):
        self.params = params
        self.lr0 = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.gamma = gamma
        self.step_count = 0
        self.names = params.names()
        sizes = [params[k].size for k in self.names]
        self._bounds = np.cumsum([0] + sizes)
        self.flat = np.concatenate([params[k].data.reshape(-1) for k in self.names]) if sizes else np.zeros(0)
        for k, a, b in zip(self.names, self._bounds[:-1], self._bounds[1:]):
            params[k].data = self.flat[a:b].reshape(params[k].shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self._g = np.empty_like(self.flat)
        self._tmp = np.empty_like(self.flat)

    @property
    def lr(self) -> float:
        return self.lr0 * self.gamma ** self.step_count

    def step(self) -> None:
        lr = self.lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        g, tmp = self._g, self._tmp
        for k, a, b in zip(self.names, self._bounds[:-1], self._bounds[1:]):
            g[a:b] = self.params.grads[k].reshape(-1)
        self.m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=tmp)
        self.m += tmp
        self.v *= self.beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.beta2
        self.v += tmp
        np.multiply(self.v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= lr / c1
        self.flat -= tmp


def save_params(path: str | Path, params: ParamStore, metadata: dict | None = None) -> None:
    """Write the binary parameter container (little-endian float64 payloads).

    Layout: ``b"GPRM"``, u8 version, u32 metadata length, UTF-8 JSON metadata,
    u32 parameter count, then per parameter: u16 name length, UTF-8 name,
    u8 ndim, u32 extents, float64 payload in C order.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION),
              struct.pack("<I", len(meta)), meta, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`save_params`; returns (arrays, metadata)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 5
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    metadata = json.loads(buf[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return arrays, metadata
