"""Diffusion-process math: variance schedule, forward noising, v-targets and DDIM.

Timesteps are 1-based (``t`` in ``1..T``) everywhere in the public API. The
tables on :class:`NoiseSchedule` are stored 0-based, so ``alpha_bars[t - 1]``
is the cumulative signal rate at timestep ``t``.

All update rules are written for v-parameterised denoisers::

    x_t  = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps
    v    = sqrt(ab_t) * eps - sqrt(1 - ab_t) * x0
    x0   = sqrt(ab_t) * x_t - sqrt(1 - ab_t) * v
    eps  = sqrt(1 - ab_t) * x_t + sqrt(ab_t) * v
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch
from torch import Tensor

TERMINAL_SIGNAL_MAX = 1e-3


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


class ScheduleUnsuitableError(ScheduleError):
    """The terminal signal rate is too large for single-step prediction."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal rate at 1-based timestep ``t``."""
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")


def schedule_from_betas(betas: Sequence[float], single_step: bool = True) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64).copy()
    if betas.ndim != 1 or betas.size == 0:
        raise ScheduleError("betas must be a non-empty 1-D sequence")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ScheduleError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if alpha_bars[-1] >= TERMINAL_SIGNAL_MAX:
        msg = (
            f"terminal alpha_bar {alpha_bars[-1]:.3g} >= {TERMINAL_SIGNAL_MAX}; "
            "x_T still carries signal from x0"
        )
        if single_step:
            raise ScheduleUnsuitableError(msg)
        warnings.warn(msg, stacklevel=2)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def make_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: Literal["linear", "scaled_linear"] = "linear",
    single_step: bool = True,
) -> NoiseSchedule:
    """Build a variance schedule.

    ``scaled_linear`` interpolates linearly in sqrt(beta) space, the Stable
    Diffusion convention. With ``single_step=True`` a schedule whose terminal
    ``alpha_bar`` is not below 1e-3 raises; otherwise it only warns.
    """
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(betas, single_step=single_step)


def toy_schedule() -> NoiseSchedule:
    """T=100 schedule for fast tests; endpoints chosen so alpha_bar_T ~ 3e-5."""
    return make_schedule(100, 1e-3, 0.2, "linear")


def _rates(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    ab = sched.alpha_bar(t)
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(x0: Tensor, eps: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    _same_shape(x0, eps, "add_noise")
    s, n = _rates(sched, t)
    return s * x0 + n * eps


def target_velocity(x0: Tensor, eps: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    _same_shape(x0, eps, "target_velocity")
    s, n = _rates(sched, t)
    return s * eps - n * x0


def predict_x0_from_v(x_t: Tensor, v_hat: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    _same_shape(x_t, v_hat, "predict_x0_from_v")
    s, n = _rates(sched, t)
    return s * x_t - n * v_hat


def predict_eps_from_v(x_t: Tensor, v_hat: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    _same_shape(x_t, v_hat, "predict_eps_from_v")
    s, n = _rates(sched, t)
    return n * x_t + s * v_hat


def trailing_timesteps(T: int, n_steps: int) -> list[int]:
    """Trailing spacing ``T - round(i * T / n)``; always starts at ``T``."""
    if n_steps < 1:
        raise ScheduleError("n_steps must be >= 1")
    if n_steps > T:
        raise ScheduleError(f"n_steps={n_steps} exceeds T={T}")
    steps: list[int] = []
    for i in range(n_steps):
        # round-half-up; Python's round() is banker's rounding
        t = T - int(math.floor(i * T / n_steps + 0.5))
        t = max(t, 1)
        if not steps or t < steps[-1]:
            steps.append(t)
    return steps


def ddim_step(
    x_t: Tensor, v_hat: Tensor, t: int, t_prev: int | None, sched: NoiseSchedule
) -> Tensor:
    """Deterministic (eta=0) DDIM update from ``t`` to ``t_prev``.

    ``t_prev=None`` marks the final step and returns the x0 estimate.
    """
    if t_prev is not None and t_prev >= t:
        raise ScheduleError(f"t_prev={t_prev} must be < t={t}")
    x0_hat = predict_x0_from_v(x_t, v_hat, t, sched)
    if t_prev is None:
        return x0_hat
    eps_hat = predict_eps_from_v(x_t, v_hat, t, sched)
    s, n = _rates(sched, t_prev)
    return s * x0_hat + n * eps_hat


def sample_timesteps(n: int, T: int, generator: torch.Generator | None = None) -> Tensor:
    """Uniform 1-based training timesteps."""
    return torch.randint(1, T + 1, (n,), generator=generator)


def alpha_bar_tensor(sched: NoiseSchedule, t: Tensor, dtype=torch.float32) -> Tensor:
    """Gather ``alpha_bar`` for a batch of 1-based timesteps, shaped [B,1,1,1]."""
    table = torch.tensor(np.array(sched.alpha_bars), dtype=dtype)
    return table[t.long() - 1].view(-1, 1, 1, 1)
