"""Finite differences, random-walk training noise, semi-implicit Euler and rollout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

WINDOW = 6
BLOWUP_FRACTION = 0.1


class BlowUpError(RuntimeError):
    """A rollout left the domain by more than the allowed margin."""

    def __init__(self, step: int, particle: int, position: np.ndarray, margin: float):
        self.step, self.particle = step, particle
        super().__init__(
            f"rollout diverged at step {step}: particle {particle} at {np.round(position, 4).tolist()} "
            f"is more than {margin:.4g} outside the bounds")


@dataclass
class NoiseConfig:
    sigma: float = 3e-4
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class RolloutState:
    """Current positions ``[Q, d]`` and the last ``w`` velocities ``[Q, w, d]``, oldest first."""

    positions: np.ndarray
    window: np.ndarray
    step: int = 0
    dt: float = 1.0

    @classmethod
    def from_frames(cls, frames: np.ndarray, dt: float = 1.0) -> "RolloutState":
        """Build from ``w + 1`` consecutive position frames ``[w+1, Q, d]``."""
        frames = np.asarray(frames, dtype=np.float64)
        vel = velocities_from_positions(frames, dt)
        return cls(frames[-1].copy(), np.ascontiguousarray(vel.transpose(1, 0, 2)), 0, dt)

    @property
    def velocity(self) -> np.ndarray:
        return self.window[:, -1]


def velocities_from_positions(positions: np.ndarray, dt: float = 1.0) -> np.ndarray:
    """V_n = (X_n - X_{n-1}) / dt for n = 1..N, from frames ``[N+1, Q, d]``."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise ValueError("need at least two frames for a velocity")
    return np.diff(positions, axis=0) / dt


def accelerations_from_positions(positions: np.ndarray, dt: float = 1.0) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    return (positions[2:] - 2.0 * positions[1:-1] + positions[:-2]) / dt ** 2


def inject_random_walk_noise(window: np.ndarray, cfg: NoiseConfig, rng=None):
    """Add a random walk along the window axis of ``[..., w, d]`` velocities.

    Increments are N(0, sigma^2 / w), so the accumulated noise on the newest
    velocity has standard deviation sigma. Returns ``(noisy, terminal)``.
    """
    window = np.asarray(window, dtype=np.float64)
    w = window.shape[-2]
    if cfg.sigma == 0:
        return window.copy(), np.zeros(window.shape[:-2] + window.shape[-1:])
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    steps = rng.normal(0.0, cfg.sigma / np.sqrt(w), size=window.shape)
    walk = np.cumsum(steps, axis=-2)
    return window + walk, walk[..., -1, :]


def training_target(x_prev, x_cur, x_next, terminal_noise=None, dt: float = 1.0) -> np.ndarray:
    """Acceleration that carries the noisy newest velocity to the clean next velocity.

    With zero noise this is the plain second difference. Otherwise the terminal
    noise is subtracted so the model learns to remove it.
    """
    acc = (np.asarray(x_next, dtype=np.float64) - 2.0 * np.asarray(x_cur, dtype=np.float64)
           + np.asarray(x_prev, dtype=np.float64)) / dt ** 2
    if terminal_noise is not None:
        acc = acc - np.asarray(terminal_noise) / dt
    return acc


def euler_step(state: RolloutState, acceleration: np.ndarray) -> RolloutState:
    """Semi-implicit Euler: the new velocity moves the position."""
    acceleration = np.asarray(acceleration, dtype=np.float64)
    if acceleration.shape != state.positions.shape:
        raise ValueError(f"acceleration {acceleration.shape} does not match positions {state.positions.shape}")
    v_new = state.velocity + state.dt * acceleration
    x_new = state.positions + state.dt * v_new
    window = np.concatenate([state.window[:, 1:], v_new[:, None]], axis=1)
    return RolloutState(x_new, window, state.step + 1, state.dt)


def check_blowup(positions: np.ndarray, bounds: np.ndarray, step: int) -> None:
    bounds = np.asarray(bounds, dtype=np.float64)
    margin = BLOWUP_FRACTION * float(np.linalg.norm(bounds[1] - bounds[0]))
    outside = np.maximum(bounds[0] - positions, positions - bounds[1]).max(axis=1)
    bad = np.flatnonzero(~(outside <= margin))
    if bad.size:
        raise BlowUpError(step, int(bad[0]), positions[bad[0]], margin)


def rollout(predict: Callable[[RolloutState], np.ndarray], initial_frames: np.ndarray, steps: int,
            bounds=None, dt: float = 1.0) -> np.ndarray:
    """Autoregressive rollout from ``w + 1`` frames; returns ``[steps, Q, d]``.

    ``predict`` maps a state to world-unit accelerations. With ``bounds`` given,
    a particle further than 10% of the box diagonal outside the box aborts
    with :class:`BlowUpError`.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    state = RolloutState.from_frames(initial_frames, dt)
    out = np.empty((steps,) + state.positions.shape)
    for k in range(steps):
        state = euler_step(state, predict(state))
        if bounds is not None:
            check_blowup(state.positions, bounds, k + 1)
        out[k] = state.positions
    return out


def inertial_rollout(initial_frames: np.ndarray, steps: int) -> np.ndarray:
    """Constant-velocity extrapolation of the last observed velocity."""
    return rollout(lambda s: np.zeros_like(s.positions), initial_frames, steps)
