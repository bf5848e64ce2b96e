"""Noise schedules and subsampled inference plans.

Timesteps are 1-based in the public API (``t = 1..T``); arrays are stored
0-based, so ``gammas[t - 1]`` is the cumulative product up to step ``t``.
All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    alphas: np.ndarray
    gammas: np.ndarray
    beta_start: float
    beta_end: float
    family: str = "linear"

    def gamma(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.gammas[t - 1])

    def to_config(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "schedule_family": self.family}


@dataclass(frozen=True, eq=False)
class InferencePlan:
    K: int
    t_indices: np.ndarray
    effective_alphas: np.ndarray
    effective_gammas: np.ndarray


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) / (T - 1) * (beta_end - beta_start)
    alphas = 1.0 - betas
    gammas = np.cumprod(alphas)
    if not (gammas[-1] > 0 and np.all(np.diff(gammas) < 0)):
        raise ScheduleError("cumulative product underflows in double precision; shorten T or lower betas")
    return NoiseSchedule(T, alphas, gammas, float(beta_start), float(beta_end))


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    family = cfg.get("schedule_family", "linear")
    if family != "linear":
        raise ScheduleError(f"unknown schedule family {family!r}")
    return make_linear_schedule(cfg.get("T", 1000), cfg.get("beta_start", 1e-4), cfg.get("beta_end", 0.02))


def inference_timesteps(T: int, K: int) -> np.ndarray:
    """K increasing timesteps in [1, T] ending at T, evenly spaced.

    ``round(k * T / K)`` for ``k = 1..K`` with half-up rounding; collisions
    (only possible through rounding) are pushed upward.
    """
    if K < 1 or K > T:
        raise ScheduleError(f"need 1 <= K <= T, got K={K}, T={T}")
    raw = np.floor(np.arange(1, K + 1, dtype=np.float64) * T / K + 0.5).astype(np.int64)
    raw = np.maximum(raw, 1)
    for k in range(1, K):
        if raw[k] <= raw[k - 1]:
            raw[k] = raw[k - 1] + 1
    # pushing upward can overshoot T; pull the tail back down
    raw[-1] = T
    for k in range(K - 2, -1, -1):
        if raw[k] >= raw[k + 1]:
            raw[k] = raw[k + 1] - 1
    return raw


def make_inference_plan(s: NoiseSchedule, K: int = 10) -> InferencePlan:
    t_idx = inference_timesteps(s.T, K)
    eff_g = s.gammas[t_idx - 1].copy()
    prev = np.concatenate([[1.0], eff_g[:-1]])
    eff_a = eff_g / prev
    if K == s.T:
        eff_a = s.alphas.copy()
    return InferencePlan(K, t_idx, eff_a, eff_g)
