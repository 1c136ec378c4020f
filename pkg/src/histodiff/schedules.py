"""Discrete-time noise schedules shared by the Gaussian and categorical branches.

A schedule is defined by per-step noise rates beta_t for t = 1..T together
with the cumulative signal fractions alpha_bar_t = prod_{s<=t} (1 - beta_s).
The same object drives both the Gaussian chain (variance mixing) and the
categorical chain (uniform mixing), which only differ in how they consume
beta_t / alpha_bar_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-branch schedule.

    ``betas[t-1]`` is beta_t and ``alpha_bars[t-1]`` is alpha_bar_t for the
    1-indexed step t in [1, num_steps]. ``alpha_bars`` is exactly the running
    product of (1 - beta_s), strictly decreasing, with every beta in
    (0, MAX_BETA].
    """

    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.shape != (self.num_steps,) or abars.shape != (self.num_steps,):
            raise ValueError(
                f"betas/alpha_bars must have shape ({self.num_steps},), "
                f"got {betas.shape} and {abars.shape}"
            )
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("all betas must lie in (0, 1)")
        if np.any(np.diff(abars) >= 0.0) or abars[0] >= 1.0 + 1e-12:
            raise ValueError("alpha_bars must be strictly decreasing and <= 1")
        expected = np.cumprod(1.0 - betas)
        rel = np.abs(abars - expected) / np.maximum(expected, 1e-300)
        if np.max(rel) > 1e-12:
            raise ValueError("alpha_bars inconsistent with cumprod(1 - betas)")
        betas.setflags(write=False)
        abars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar at step t-1, with the t=1 boundary alpha_bar_0 = 1."""
        self._check_step(t)
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise IndexError(f"step {t} outside [1, {self.num_steps}]")


def cosine_schedule(num_steps: int, offset: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: alpha_bar_t follows f(t)/f(0) with
    f(t) = cos^2(((t/T + offset) / (1 + offset)) * pi/2), betas clipped to MAX_BETA.

    After clipping, alpha_bars is recomputed as the exact running product so the
    recurrence alpha_bar_t = alpha_bar_{t-1} * (1 - beta_t) holds to the last bit.
    """
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not 0.0 < offset < 1.0:
        raise ValueError(f"offset must lie in (0, 1), got {offset!r}")

    t = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((t / num_steps + offset) / (1.0 + offset)) * (math.pi / 2.0)) ** 2
    abar_raw = f / f[0]
    betas = 1.0 - abar_raw[1:] / abar_raw[:-1]
    betas = np.clip(betas, None, MAX_BETA)
    if np.any(betas <= 0.0):
        raise ValueError("degenerate cosine schedule: non-positive beta")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(num_steps=int(num_steps), betas=betas, alpha_bars=alpha_bars)


def schedule_at(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    """(beta_t, alpha_bar_t) for the 1-indexed step t; IndexError outside [1, T]."""
    return schedule.beta(t), schedule.alpha_bar(t)
