"""Neural-field reduced-order model.

A field network maps reference positions X to a basis U(X) of shape [d, r].
Full-order displacements are reconstructed as X + U(X) q with per-step
weights q fitted by damped least squares on the reduced points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .tensor import Adam, ParamStore, Tensor, concat, gelu, gradient, linear, matmul, mse, recording, reshape
from .tensor.params import load_params, save_params

DAMPING = 1e-8
CONDITION_LIMIT = 1e12


class RankDeficientWarning(RuntimeWarning):
    pass


def positional_encoding(u: np.ndarray, octaves: int) -> np.ndarray:
    """``[u, sin(2^k pi u), cos(2^k pi u)]`` for k < octaves, per coordinate."""
    u = np.asarray(u, dtype=np.float64)
    feats = [u]
    for k in range(octaves):
        arg = (2.0 ** k) * np.pi * u
        feats += [np.sin(arg), np.cos(arg)]
    return np.concatenate(feats, axis=1)


class RomBasis:
    """Field network X -> U(X) in R^{d x r}.

    Hidden layers use gelu. The output layer reads the last hidden layer,
    the encoding itself and a constant, so smooth low-frequency fields and
    constants are representable directly.
    """

    def __init__(self, dim: int, rank: int = 16, bounds=None, hidden: int = 128, depth: int = 4,
                 octaves: int = 4, seed: int = 0):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.dim, self.rank, self.hidden, self.depth, self.octaves = dim, rank, hidden, depth, octaves
        self.bounds = np.asarray(bounds if bounds is not None else [[0.0] * dim, [1.0] * dim], dtype=np.float64)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        enc = dim * (1 + 2 * octaves)
        sizes = [enc] + [hidden] * depth
        self.layers = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            self.layers.append((self.params.add(f"hidden.{k}.w", rng.uniform(-bound, bound, (a, b))),
                                self.params.add(f"hidden.{k}.b", rng.uniform(-bound, bound, b))))
        out = dim * rank
        self.w_out = self.params.add("out.w", rng.uniform(-1, 1, (hidden + enc, out)) / np.sqrt(hidden + enc))
        self.b_out = self.params.add("out.b", np.zeros(out))
        self.snapshot_stats: dict = {}

    @property
    def feature_width(self) -> int:
        return self.hidden + self.dim * (1 + 2 * self.octaves) + 1

    def encode(self, x: np.ndarray) -> np.ndarray:
        span = self.bounds[1] - self.bounds[0]
        return positional_encoding((np.asarray(x, dtype=np.float64) - self.bounds[0]) / span, self.octaves)

    def _hidden(self, enc: np.ndarray) -> Tensor:
        h = Tensor(enc)
        for w, b in self.layers:
            h = gelu(linear(h, w, b))
        return h

    def features(self, x: np.ndarray) -> np.ndarray:
        """Inputs of the output layer ``[P, hidden + enc + 1]`` (constant last)."""
        enc = self.encode(x)
        h = self._hidden(enc).data
        return np.concatenate([h, enc, np.ones((len(enc), 1))], axis=1)

    def output_weights(self) -> np.ndarray:
        return np.concatenate([self.w_out.data, self.b_out.data[None]], axis=0)

    def set_output_weights(self, w: np.ndarray) -> None:
        self.params.set("out.w", w[:-1])
        self.params.set("out.b", w[-1])

    def evaluate(self, x: np.ndarray, chunk: int = 16384) -> np.ndarray:
        """U(X) as ``[P, d, r]``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty((len(x), self.dim, self.rank))
        w = self.output_weights()
        for s in range(0, len(x), chunk):
            out[s:s + chunk] = (self.features(x[s:s + chunk]) @ w).reshape(-1, self.dim, self.rank)
        return out

    def field(self, x: np.ndarray) -> Tensor:
        """Differentiable U(X) as ``[P*d, r]``."""
        enc = self.encode(x)
        h = self._hidden(enc)
        u = linear(concat([h, Tensor(enc)], axis=1), self.w_out, self.b_out)
        return reshape(u, (len(enc) * self.dim, self.rank))

    def metadata(self) -> dict:
        return {"dim": self.dim, "rank": self.rank, "hidden": self.hidden, "depth": self.depth,
                "octaves": self.octaves, "bounds": self.bounds.tolist(), "seed": self.seed,
                "snapshot_stats": self.snapshot_stats}

    def save(self, path) -> None:
        save_params(path, self.params, {"rom": self.metadata()})

    @classmethod
    def load(cls, path) -> "RomBasis":
        arrays, meta = load_params(path)
        if "rom" not in meta:
            raise ValueError(f"{path}: not a ROM basis checkpoint")
        m = meta["rom"]
        basis = cls(m["dim"], m["rank"], m["bounds"], m["hidden"], m["depth"], m["octaves"], m["seed"])
        for name in basis.params.names():
            basis.params.set(name, arrays[name])
        basis.snapshot_stats = m.get("snapshot_stats", {})
        return basis


@dataclass
class RomWeights:
    q: np.ndarray
    residual: float
    condition: float
    rank_deficient: bool = False


def _lstsq(a: np.ndarray, b: np.ndarray, lam: float = DAMPING) -> tuple[np.ndarray, float]:
    """Damped normal equations for ``a x = b``; returns (x, condition of a^T a)."""
    ata = a.T @ a
    cond = float(np.linalg.cond(ata)) if ata.size else 0.0
    x = np.linalg.solve(ata + lam * np.eye(ata.shape[0]), a.T @ b)
    return x, cond


def solve_weights(basis, reduced_positions: np.ndarray, reference: np.ndarray, lam: float = DAMPING,
                  basis_values: np.ndarray | None = None) -> RomWeights:
    """q = argmin sum_k ||phi(X^k) - X^k - U(X^k) q||^2 with Tikhonov damping.

    ``basis_values`` may hold a precomputed U(X^k) ``[Q, d, r]``; ``basis``
    is then unused.
    """
    reduced_positions = np.asarray(reduced_positions, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if reduced_positions.shape != reference.shape:
        raise ValueError(f"positions {reduced_positions.shape} vs reference {reference.shape}")
    u = basis.evaluate(reference) if basis_values is None else basis_values
    a = u.reshape(-1, u.shape[-1])
    b = (reduced_positions - reference).reshape(-1)
    q, cond = _lstsq(a, b, lam)
    flagged = not np.isfinite(cond) or cond > CONDITION_LIMIT
    if flagged:
        warnings.warn(f"rank-deficient weight solve (condition {cond:.3g})", RankDeficientWarning)
    res = float(np.linalg.norm(a @ q - b))
    return RomWeights(q, res, cond, flagged)


def upsample(basis, weights, points: np.ndarray, basis_values: np.ndarray | None = None) -> np.ndarray:
    """phi(X^j) = X^j + U(X^j) q at arbitrary query points ``[P, d]``.

    Because U is fixed over time, callers reconstructing many steps can pass
    ``basis_values = basis.evaluate(points)`` once.
    """
    q = weights.q if isinstance(weights, RomWeights) else np.asarray(weights, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    u = basis.evaluate(points) if basis_values is None else basis_values
    p, d, r = u.shape
    return points + (u.reshape(p * d, r) @ q).reshape(p, d)


def _snapshots(trajectories) -> list[tuple[np.ndarray, np.ndarray]]:
    """(reference X [P, d], displacements [T, P, d]) per trajectory, frame 0 as reference."""
    out = []
    for traj in trajectories:
        x = traj.frames() if hasattr(traj, "frames") else np.asarray(traj, dtype=np.float64)
        out.append((x[0], x[1:] - x[0]))
    return out


def _solve_q(u: np.ndarray, disp: np.ndarray, lam: float) -> np.ndarray:
    a = u.reshape(-1, u.shape[-1])
    ata = a.T @ a + lam * np.eye(a.shape[1])
    return np.linalg.solve(ata, a.T @ disp.reshape(len(disp), -1).T).T


def _solve_output(basis: RomBasis, data, qs, lam: float) -> np.ndarray:
    """Closed-form output layer given all q (Kronecker normal equations per axis)."""
    m, r, d = basis.feature_width, basis.rank, basis.dim
    w = np.empty((m, d, r))
    feats = [basis.features(x) for x, _ in data]
    for i in range(d):
        lhs = np.zeros((m * r, m * r))
        rhs = np.zeros((m, r))
        for f, (_, disp), q in zip(feats, data, qs):
            lhs += np.kron(f.T @ f, q.T @ q)
            rhs += f.T @ disp[:, :, i].T @ q
        sol = np.linalg.solve(lhs + lam * np.eye(m * r), rhs.reshape(-1))
        w[:, i, :] = sol.reshape(m, r)
    return w.reshape(m, d * r)


def _svd_start(basis: RomBasis, x: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Output weights and q that are optimal for one trajectory given the hidden layers.

    Every field lies in the column span of the features, so the best rank-r
    fit is a truncated SVD of the displacements projected onto that span.
    """
    m, r, d = basis.feature_width, basis.rank, basis.dim
    uf, sf, vt = np.linalg.svd(basis.features(x), full_matrices=False)
    keep = sf > sf[0] * 1e-10
    uf, sf, vt = uf[:, keep], sf[keep], vt[keep]
    proj = np.concatenate([uf.T @ disp[:, :, i].T for i in range(d)])
    left, sv, right = np.linalg.svd(proj, full_matrices=False)
    k = min(r, len(sv))
    w = np.zeros((m, d, r))
    blocks = np.split(left[:, :k], d)
    for i in range(d):
        w[:, i, :k] = vt.T @ (blocks[i] / sf[:, None])
    return w.reshape(m, d * r)


def fit_basis(trajectories: Sequence, rank: int = 16, epochs: int = 20, seed: int = 0,
              inner_steps: int = 20, lr: float = 1e-3, batch_points: int = 2048,
              bounds=None, lam: float = DAMPING, **kw) -> RomBasis:
    """Fit U by alternating closed-form q, closed-form output layer and Adam on the hidden layers.

    ``trajectories`` are Trajectory objects or ``[N+1, P, d]`` arrays; frame
    0 is the reference configuration.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    data = _snapshots(trajectories)
    if not data:
        raise ValueError("need at least one trajectory")
    n_snap = sum(len(disp) for _, disp in data)
    if rank > n_snap:
        warnings.warn(f"rank {rank} exceeds the {n_snap} available snapshots", RuntimeWarning)
    dim = data[0][0].shape[1]
    if bounds is None:
        allx = np.concatenate([x for x, _ in data])
        bounds = [allx.min(axis=0), allx.max(axis=0)]
        bounds = [bounds[0], np.where(bounds[1] > bounds[0], bounds[1], bounds[0] + 1.0)]
    basis = RomBasis(dim, rank, bounds, seed=seed, **kw)
    rng = np.random.default_rng(seed)
    hidden_names = [n for n in basis.params.names() if n.startswith("hidden.")]
    sub = basis.params.subset(hidden_names)
    opt = Adam(sub, lr)
    largest = max(range(len(data)), key=lambda k: len(data[k][1]))
    basis.set_output_weights(_svd_start(basis, *data[largest]))
    qs = [_solve_q(basis.evaluate(x), disp, lam) for x, disp in data]
    for epoch in range(epochs):
        basis.set_output_weights(_solve_output(basis, data, qs, lam))
        qs = [_solve_q(basis.evaluate(x), disp, lam) for x, disp in data]
        if epoch == epochs - 1:
            break
        for _ in range(inner_steps):
            k = int(rng.integers(len(data)))
            x, disp = data[k]
            pick = rng.choice(len(x), size=min(batch_points, len(x)), replace=False)
            with recording() as tape:
                u = basis.field(x[pick])
                pred = matmul(u, Tensor(qs[k].T))
                target = disp[:, pick].transpose(1, 2, 0).reshape(-1, len(disp))
                val = mse(pred, target)
                gradient(val, sub, tape)
            opt.step()
    err = [np.mean((basis.evaluate(x) @ q.T - disp.transpose(1, 2, 0)) ** 2) for (x, disp), q in zip(data, qs)]
    basis.snapshot_stats = {"snapshots": int(n_snap), "train_mse": float(np.mean(err))}
    return basis


def volume_metrics(sequence: np.ndarray) -> tuple[float, float]:
    """(mean over steps of the minimum nearest-neighbor distance, mean over steps of the max speed)."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[1] < 2:
        raise ValueError("need a [T, Q, d] sequence with Q >= 2")
    mins = []
    for frame in seq:
        dist, _ = cKDTree(frame).query(frame, k=2)
        mins.append(dist[:, 1].min())
    if len(seq) > 1:
        speed = np.linalg.norm(np.diff(seq, axis=0), axis=2).max(axis=1)
        max_speed = float(speed.mean())
    else:
        max_speed = 0.0
    return float(np.mean(mins)), max_speed
