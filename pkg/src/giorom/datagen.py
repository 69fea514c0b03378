"""Deterministic toy particle simulators and the binary trajectory container.

Both generators advance with one semi-implicit Euler update per sub-step
(velocity first, then position with the new velocity). Time is measured in
frames (dt = 1 between stored frames), so gravity is in box units per frame^2.

Container layout, all little-endian::

    magic     4s   b"GTRJ"
    version   u8   1
    d         u8
    Q         u32
    frames    u32  (N + 1)
    dt        f64
    bounds    f64[2d]  lo then hi
    material  u8   index into MATERIALS
    seed      u64
    positions f32[frames, Q, d]
    types     u8[Q]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

MAGIC = b"GTRJ"
VERSION = 1
MATERIALS = ("water", "sand", "plasticine", "elastic")
_HEADER = struct.Struct("<4sBBIId")


@dataclass
class MaterialParams:
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -1e-4]))
    restitution: float = 0.5
    stiffness: float = 0.1
    damping: float = 0.3
    radius: float = 0.025
    spacing: float = 0.02
    substeps: int = 1

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError("damping must lie in [0, 1]")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


def elastic_defaults() -> MaterialParams:
    return MaterialParams(gravity=np.array([0.0, -5e-5]), restitution=0.3, stiffness=0.05,
                          damping=0.1, radius=0.0, spacing=0.03, substeps=8)


@dataclass
class Trajectory:
    positions: np.ndarray
    particle_type: np.ndarray
    bounds: np.ndarray
    dt: float = 1.0
    material: str = "water"
    seed: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        if self.positions.ndim != 3:
            raise ValueError(f"positions must be [frames, Q, d], got {self.positions.shape}")
        self.particle_type = np.asarray(self.particle_type, dtype=np.uint8)
        if self.particle_type.shape != (self.num_particles,):
            raise ValueError("particle_type must have one entry per particle")
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, self.dim)
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}")

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def frames(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Positions promoted to float64."""
        return self.positions[start:stop].astype(np.float64)

    def with_positions(self, positions: np.ndarray) -> "Trajectory":
        return replace(self, positions=positions)


def write_trajectory(path, traj: Trajectory) -> None:
    d = traj.dim
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, traj.num_particles, traj.num_frames, float(traj.dt)))
        fh.write(np.asarray(traj.bounds, dtype="<f8").reshape(-1).tobytes())
        fh.write(struct.pack("<BQ", MATERIALS.index(traj.material), int(traj.seed)))
        fh.write(np.ascontiguousarray(traj.positions, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(traj.particle_type, dtype=np.uint8).tobytes())


def read_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a trajectory file")
    magic, version, d, q, frames, dt = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported trajectory version {version}")
    off = _HEADER.size
    bounds = np.frombuffer(raw, dtype="<f8", count=2 * d, offset=off).reshape(2, d)
    off += 16 * d
    material, seed = struct.unpack_from("<BQ", raw, off)
    off += 9
    n_pos = frames * q * d
    expected = off + 4 * n_pos + q
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    positions = np.frombuffer(raw, dtype="<f4", count=n_pos, offset=off).reshape(frames, q, d)
    types = np.frombuffer(raw, dtype=np.uint8, count=q, offset=off + 4 * n_pos)
    return Trajectory(positions.copy(), types.copy(), bounds.copy(), dt, MATERIALS[material], seed)


def _reflect(x, v, lo, hi, restitution):
    """Mirror particles that crossed a wall back inside and scale their normal velocity."""
    below = x < lo
    x = np.where(below, lo + restitution * (lo - x), x)
    v = np.where(below, -restitution * v, v)
    above = x > hi
    x = np.where(above, hi - restitution * (x - hi), x)
    v = np.where(above, -restitution * v, v)
    return np.clip(x, lo, hi), v


def _repulsion(x, v, params: MaterialParams):
    acc = np.zeros_like(x)
    if params.stiffness == 0.0 and params.damping == 0.0 or params.radius <= 0:
        return acc
    pairs = cKDTree(x).query_pairs(params.radius, output_type="ndarray")
    if len(pairs) == 0:
        return acc
    i, j = pairs[:, 0], pairs[:, 1]
    diff = x[i] - x[j]
    dist = np.linalg.norm(diff, axis=1)
    ok = dist > 1e-12
    i, j, diff, dist = i[ok], j[ok], diff[ok], dist[ok]
    n = diff / dist[:, None]
    closing = np.einsum("ij,ij->i", v[i] - v[j], n)
    mag = params.stiffness * (params.radius - dist) - params.damping * closing
    f = mag[:, None] * n
    np.add.at(acc, i, f)
    np.subtract.at(acc, j, f)
    return acc


def _block(q: int, spacing: float, rng, lo, hi):
    """Jittered rectangular block of q particles, placed at a random spot away from walls."""
    cols = int(np.ceil(np.sqrt(2 * q)))
    rows = int(np.ceil(q / cols))
    idx = np.arange(q)
    pts = np.stack([idx % cols, idx // cols], axis=1).astype(np.float64) * spacing
    pts += rng.uniform(-0.1, 0.1, pts.shape) * spacing
    extent = np.array([cols - 1, rows - 1]) * spacing
    room = (hi - lo) - extent - 4 * spacing
    if np.any(room < 0):
        raise ValueError(f"{q} particles at spacing {spacing} do not fit in the box")
    corner = lo + 2 * spacing + rng.uniform(0, 1, 2) * room * np.array([1.0, 0.5]) + np.array([0, 0.5]) * room
    return pts + corner


def generate_fluidlike(q: int, steps: int, params: MaterialParams | None = None, seed: int = 0,
                       bounds=((0.0, 0.0), (1.0, 1.0)), material: str = "water",
                       init_speed: float = 5e-3) -> Trajectory:
    """Gravity, linear-spring repulsion with pair damping and restitution walls.

    Returns ``steps + 1`` frames. A particle never within the interaction
    radius of another and away from walls follows exact discrete free fall.
    """
    if q < 2:
        raise ValueError("fluid-like generator needs Q >= 2")
    params = params or MaterialParams()
    rng = np.random.default_rng(seed)
    bounds = np.asarray(bounds, dtype=np.float64)
    lo, hi = bounds
    x = _block(q, params.spacing, rng, lo, hi)
    v = np.tile(rng.uniform(-init_speed, init_speed, 2), (q, 1))
    return _integrate(x, v, steps, params, lambda x, v: _repulsion(x, v, params), bounds,
                      material, seed, np.full(q, MATERIALS.index(material), dtype=np.uint8))


def _integrate(x, v, steps, params, internal, bounds, material, seed, types, trace=None) -> Trajectory:
    lo, hi = bounds
    h = 1.0 / params.substeps
    out = np.empty((steps + 1,) + x.shape, dtype=np.float32)
    out[0] = x
    for n in range(steps):
        for _ in range(params.substeps):
            a = params.gravity + internal(x, v)
            v = v + h * a
            x = x + h * v
            x, v = _reflect(x, v, lo, hi, params.restitution)
            if trace is not None:
                trace(x, v)
        out[n + 1] = x
    return Trajectory(out, types, bounds, 1.0, material, seed)


@dataclass
class Lattice:
    """Square spring lattice: axis and diagonal springs with their rest lengths."""

    side: int
    spacing: float

    def __post_init__(self):
        ij = np.arange(self.side ** 2).reshape(self.side, self.side)
        pairs, rest = [], []
        s = self.spacing
        for a, b, length in ((ij[:, :-1], ij[:, 1:], s), (ij[:-1, :], ij[1:, :], s),
                             (ij[:-1, :-1], ij[1:, 1:], s * np.sqrt(2)),
                             (ij[:-1, 1:], ij[1:, :-1], s * np.sqrt(2))):
            pairs.append(np.stack([a.reshape(-1), b.reshape(-1)], axis=1))
            rest.append(np.full(a.size, length))
        self.springs = np.concatenate(pairs)
        self.rest = np.concatenate(rest)

    def rest_positions(self) -> np.ndarray:
        idx = np.arange(self.side ** 2)
        return np.stack([idx % self.side, idx // self.side], axis=1).astype(np.float64) * self.spacing


def spring_acceleration(x, v, springs, rest, stiffness, damping):
    i, j = springs[:, 0], springs[:, 1]
    diff = x[j] - x[i]
    dist = np.linalg.norm(diff, axis=1)
    n = diff / np.maximum(dist, 1e-12)[:, None]
    opening = np.einsum("ij,ij->i", v[j] - v[i], n)
    mag = stiffness * (dist - rest) + damping * opening
    f = mag[:, None] * n
    acc = np.zeros_like(x)
    np.add.at(acc, i, f)
    np.subtract.at(acc, j, f)
    return acc


def lattice_energy(x, v, springs, rest, stiffness, gravity) -> float:
    """Kinetic + spring + gravitational potential energy per unit particle mass."""
    diff = x[springs[:, 1]] - x[springs[:, 0]]
    stretch = np.linalg.norm(diff, axis=1) - rest
    return float(0.5 * np.sum(v * v) + 0.5 * stiffness * np.sum(stretch ** 2) - np.sum(x @ gravity))


def generate_elasticlike(q: int, steps: int, params: MaterialParams | None = None, seed: int = 0,
                         bounds=((0.0, 0.0), (1.0, 1.0)), material: str = "elastic",
                         init_speed: float = 0.0, perturb: float = 0.0, trace=None) -> Trajectory:
    """Damped spring lattice released above the floor.

    ``trace(x, v)`` is called with the float64 state after every sub-step.
    """
    side = int(round(np.sqrt(q)))
    if side * side != q or side < 2:
        raise ValueError(f"elastic lattice needs Q to be a perfect square >= 4, got {q}")
    params = params or elastic_defaults()
    rng = np.random.default_rng(seed)
    bounds = np.asarray(bounds, dtype=np.float64)
    lo, hi = bounds
    lat = Lattice(side, params.spacing)
    x = lat.rest_positions()
    room = (hi - lo) - x.max(axis=0) - 4 * params.spacing
    if np.any(room < 0):
        raise ValueError("lattice does not fit in the box")
    x = x + lo + 2 * params.spacing + room * np.array([rng.uniform(), rng.uniform(0.5, 1.0)])
    x = x + perturb * params.spacing * rng.standard_normal(x.shape)
    v = np.tile(rng.uniform(-init_speed, init_speed, 2), (q, 1))

    def internal(x, v):
        return spring_acceleration(x, v, lat.springs, lat.rest, params.stiffness, params.damping)

    return _integrate(x, v, steps, params, internal, bounds, material, seed,
                      np.full(q, MATERIALS.index(material), dtype=np.uint8), trace)
