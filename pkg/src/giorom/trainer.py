"""Normalization statistics, the Adam training loop, checkpoints and validation."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .datagen import Trajectory
from .dynamics import (
    WINDOW, BlowUpError, NoiseConfig, RolloutState, inertial_rollout, inject_random_walk_noise, rollout,
    training_target,
)
from .geometry import PointCloud, build_radius_graph, find_connected_radius, subsample_indices
from .operator import FrameInput, ModelConfig, OperatorModel, prepare
from .tensor import Adam, Tensor, gradient, mse, recording
from .tensor.params import load_params, save_params

STD_FLOOR = 1e-8
FRACTION_RANGES = {
    "elastic": (0.01, 0.03),
    "plasticine": (0.10, 0.15),
    "water": (0.20, 0.25),
    "sand": (0.35, 0.45),
}


class _Moments:
    """Per-axis running mean and M2 with Chan's pairwise merge."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.size)
        n = x.shape[0]
        if n == 0:
            return
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        tot = self.count + n
        delta = mb - self.mean
        self.mean = self.mean + delta * n / tot
        self.m2 = self.m2 + m2b + delta ** 2 * self.count * n / tot
        self.count = tot

    @property
    def std(self) -> np.ndarray:
        var = self.m2 / self.count if self.count else np.zeros_like(self.m2)
        return np.maximum(np.sqrt(var), STD_FLOOR)


class NormStats:
    """Streaming velocity and acceleration statistics, frozen after the first pass."""

    def __init__(self, dim: int = 2):
        self.dim = dim
        self._vel = _Moments(dim)
        self._acc = _Moments(dim)
        self.frozen = False

    def update(self, velocities: np.ndarray, accelerations: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("statistics are frozen")
        self._vel.update(velocities)
        self._acc.update(accelerations)

    def freeze(self) -> "NormStats":
        self.frozen = True
        return self

    @property
    def count(self) -> int:
        return self._vel.count

    @property
    def vel_mean(self):
        return self._vel.mean

    @property
    def vel_std(self):
        return self._vel.std

    @property
    def acc_mean(self):
        return self._acc.mean

    @property
    def acc_std(self):
        return self._acc.std

    def normalize_velocity(self, v):
        return (np.asarray(v) - self.vel_mean) / self.vel_std

    def normalize_acceleration(self, a):
        return (np.asarray(a) - self.acc_mean) / self.acc_std

    def denormalize_acceleration(self, a):
        return np.asarray(a) * self.acc_std + self.acc_mean

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "NormStats":
        """One pass over every clean frame, then frozen."""
        stats = cls(trajectories[0].dim)
        for traj in trajectories:
            x = traj.frames()
            v = np.diff(x, axis=0)
            stats.update(v, np.diff(v, axis=0))
        return stats.freeze()

    def to_dict(self) -> dict:
        return {"dim": self.dim, "vel_count": self._vel.count, "acc_count": self._acc.count,
                "vel_mean": self._vel.mean.tolist(), "vel_m2": self._vel.m2.tolist(),
                "acc_mean": self._acc.mean.tolist(), "acc_m2": self._acc.m2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        s = cls(d["dim"])
        for mom, key in ((s._vel, "vel"), (s._acc, "acc")):
            mom.count = int(d[f"{key}_count"])
            mom.mean = np.asarray(d[f"{key}_mean"], dtype=np.float64)
            mom.m2 = np.asarray(d[f"{key}_m2"], dtype=np.float64)
        return s.freeze()


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 4
    gamma: float = 0.1 ** (1 / 5e6)
    steps: int = 50_000
    sigma: float = 3e-4
    window: int = WINDOW
    fractions: dict = field(default_factory=lambda: dict(FRACTION_RANGES))
    r0: float = 0.02
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.lr < 0 or self.batch < 1 or self.steps < 0 or not 0 < self.gamma <= 1:
            raise ValueError("lr >= 0, batch >= 1, steps >= 0 and gamma in (0, 1] are required")
        if self.sigma < 0 or self.r0 <= 0:
            raise ValueError("sigma >= 0 and r0 > 0 are required")
        self.fractions = {k: tuple(float(x) for x in v) for k, v in self.fractions.items()}
        for name, (lo, hi) in self.fractions.items():
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"fraction range for {name} must lie in (0, 1], got {(lo, hi)}")

    def fraction_range(self, material: str) -> tuple[float, float]:
        return self.fractions.get(material, (1.0, 1.0))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fractions"] = {k: list(v) for k, v in self.fractions.items()}
        return out


def load_config(path) -> dict:
    """YAML with optional ``model``, ``train`` and ``data`` sections."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return raw


def loss(pred: Tensor, target) -> Tensor:
    """Mean over particles and axes of the squared error."""
    target = np.asarray(target, dtype=np.float64)
    if tuple(pred.shape) != target.shape:
        raise ValueError(f"loss: prediction {pred.shape} vs target {target.shape}")
    return mse(pred, target)


# ----------------------------------------------------------------------------
# samples
# ----------------------------------------------------------------------------

@dataclass
class Sample:
    frame: FrameInput
    target: np.ndarray
    index: np.ndarray


def window_at(x: np.ndarray, t: int, w: int = WINDOW) -> np.ndarray:
    """Velocities ``[Q, w, d]`` ending at frame ``t``."""
    return np.diff(x[t - w:t + 1], axis=0).transpose(1, 0, 2)


def make_sample(x: np.ndarray, t: int, traj: Trajectory, stats: NormStats, index: np.ndarray,
                radius: float, noise: NoiseConfig | None = None, rng=None) -> Sample:
    """Featurize frame ``t`` of ``x`` restricted to ``index`` with the given graph radius."""
    xs = x[:, index]
    win = window_at(xs, t)
    term = None
    if noise is not None and noise.sigma > 0:
        win, term = inject_random_walk_noise(win, noise, rng)
    target = None
    if t + 1 < x.shape[0]:
        target = stats.normalize_acceleration(training_target(xs[t - 1], xs[t], xs[t + 1], term))
    types = traj.particle_type[index]
    frame = FrameInput(xs[t], stats.normalize_velocity(win).reshape(len(index), -1), types,
                       traj.bounds, radius)
    return Sample(frame, target, index)


def draw_sample(traj: Trajectory, x: np.ndarray, cfg: TrainConfig, stats: NormStats, rng) -> tuple[Sample, float]:
    """Random frame, random subsample, connected radius and training noise."""
    t = int(rng.integers(cfg.window, traj.num_frames - 1))
    lo, hi = cfg.fraction_range(traj.material)
    frac = float(rng.uniform(lo, hi))
    cloud = PointCloud(x[t], traj.bounds, traj.particle_type)
    index = subsample_indices(cloud, frac, rng)
    r, graph = find_connected_radius(cloud.take(index), cfg.r0, return_graph=True)
    sample = make_sample(x, t, traj, stats, index, r, NoiseConfig(cfg.sigma), rng)
    sample.frame.graph = graph
    return sample, r


def train_step(model: OperatorModel, optimizer: Adam, samples: Sequence[Sample]) -> float:
    """Forward, loss, backward and one Adam update; returns the loss."""
    plan = prepare(model.cfg, [s.frame for s in samples])
    target = np.concatenate([s.target for s in samples])
    with recording() as tape:
        val = loss(model.apply(plan), target)
        gradient(val, model.params, tape)
    optimizer.step()
    return val.item()


@dataclass
class TrainResult:
    model: OperatorModel
    stats: NormStats
    losses: np.ndarray
    radius: float
    seconds: float


def train(trajectories: Sequence[Trajectory], model_cfg: ModelConfig, cfg: TrainConfig,
          stats: NormStats | None = None, log_path=None, checkpoint=None,
          model: OperatorModel | None = None) -> TrainResult:
    """Run ``cfg.steps`` Adam steps on random (trajectory, frame) pairs."""
    if not trajectories:
        raise ValueError("need at least one training trajectory")
    for tr in trajectories:
        if tr.num_frames < cfg.window + 2:
            raise ValueError(f"trajectory has {tr.num_frames} frames, need >= {cfg.window + 2}")
    stats = stats or NormStats.from_trajectories(trajectories)
    model = model or OperatorModel(model_cfg)
    opt = Adam(model.params, cfg.lr, gamma=cfg.gamma)
    rng = np.random.default_rng(cfg.seed)
    frames = [tr.frames() for tr in trajectories]
    losses = np.empty(cfg.steps)
    radii = []
    log = None
    if log_path is not None:
        log = open(log_path, "w", newline="")
        writer = csv.writer(log)
        writer.writerow(["step", "loss", "lr", "wall_time"])
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            batch = []
            for _ in range(cfg.batch):
                k = int(rng.integers(len(trajectories)))
                sample, r = draw_sample(trajectories[k], frames[k], cfg, stats, rng)
                batch.append(sample)
                radii.append(r)
            lr = opt.lr
            losses[step] = train_step(model, opt, batch)
            if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                writer.writerow([step, repr(float(losses[step])), repr(float(lr)), f"{time.perf_counter() - t0:.3f}"])
                log.flush()
    finally:
        if log is not None:
            log.close()
    seconds = time.perf_counter() - t0
    radius = float(np.median(radii)) if radii else cfg.r0
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, stats, radius, cfg)
    return TrainResult(model, stats, losses, radius, seconds)


# ----------------------------------------------------------------------------
# checkpoints and inference
# ----------------------------------------------------------------------------

def save_checkpoint(path, model: OperatorModel, stats: NormStats, radius: float,
                    cfg: TrainConfig | None = None) -> None:
    meta = {"model": model.cfg.to_dict(), "stats": stats.to_dict(), "radius": float(radius)}
    if cfg is not None:
        meta["train"] = cfg.to_dict()
    save_params(path, model.params, meta)


def load_checkpoint(path) -> tuple[OperatorModel, NormStats, dict]:
    arrays, meta = load_params(path)
    if "model" not in meta or "stats" not in meta:
        raise ValueError(f"{path}: checkpoint lacks model or stats metadata")
    model = OperatorModel(ModelConfig.from_dict(meta["model"]))
    model.load_state(arrays)
    return model, NormStats.from_dict(meta["stats"]), meta


class Simulator:
    """Rollout predictor: graph at a fixed radius, model, world-unit accelerations."""

    def __init__(self, model: OperatorModel, stats: NormStats, radius: float, bounds, types):
        self.model, self.stats, self.radius = model, stats, float(radius)
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.types = np.asarray(types)

    def frame(self, positions: np.ndarray, window: np.ndarray) -> FrameInput:
        q = positions.shape[0]
        cloud = PointCloud(positions, self.bounds, self.types)
        graph = build_radius_graph(cloud, self.radius)
        win = self.stats.normalize_velocity(window).reshape(q, -1)
        return FrameInput(positions, win, self.types, self.bounds, self.radius, graph)

    def normalized(self, positions, window) -> np.ndarray:
        return self.model.forward([self.frame(positions, window)]).data

    def __call__(self, state: RolloutState) -> np.ndarray:
        return self.stats.denormalize_acceleration(self.normalized(state.positions, state.window))


def rollout_subset(traj: Trajectory, fraction: float, seed: int) -> np.ndarray:
    """Fixed subsample used for evaluation rollouts, chosen on the first frame."""
    cloud = PointCloud(traj.frames(0, 1)[0], traj.bounds, traj.particle_type)
    return subsample_indices(cloud, fraction, np.random.default_rng(seed))


def position_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2))


def validate(model: OperatorModel, stats: NormStats, trajectories: Sequence[Trajectory], radius: float,
             steps: int = 100, start: int = WINDOW, fraction: float | None = None, seed: int = 0,
             one_step_every: int = 10, predictor=None) -> dict:
    """One-step MSE (normalized, no noise) and rollout MSE with the inertial baseline.

    ``predictor(traj, x, index)`` may replace the learned simulator; it must
    return a callable that maps a :class:`RolloutState` to accelerations.
    """
    one, roll, base = [], [], []
    for k, traj in enumerate(trajectories):
        frac = fraction if fraction is not None else float(np.mean(FRACTION_RANGES.get(traj.material, (1, 1))))
        index = rollout_subset(traj, frac, seed + k)
        x = traj.frames()[:, index]
        sim = Simulator(model, stats, radius, traj.bounds, traj.particle_type[index])
        for t in range(WINDOW, traj.num_frames - 1, one_step_every):
            target = stats.normalize_acceleration(training_target(x[t - 1], x[t], x[t + 1]))
            one.append(np.mean((sim.normalized(x[t], window_at(x, t)) - target) ** 2))
        k_steps = min(steps, traj.num_frames - 1 - start)
        init = x[start - WINDOW:start + 1]
        pred_fn = sim if predictor is None else predictor(traj, x, index)
        truth = x[start + 1:start + 1 + k_steps]
        try:
            pred = rollout(pred_fn, init, k_steps, bounds=traj.bounds)
            roll.append(position_mse(pred, truth))
        except BlowUpError:
            roll.append(float("inf"))
        base.append(position_mse(inertial_rollout(init, k_steps), truth))
    return {"one_step_mse": float(np.mean(one)) if one else float("nan"),
            "rollout_mse": float(np.mean(roll)), "inertial_mse": float(np.mean(base)),
            "per_trajectory": list(zip(roll, base))}
