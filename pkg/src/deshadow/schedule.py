"""Diffusion noise schedules, forward noising, and DDIM sampling plans.

Everything in this module is plain numpy in float64: these are the reference
formulas the rest of the package is tested against, so precision and
reproducibility matter more than speed here.

Index convention: timesteps are 1-based, ``t in [1, T]``.  ``betas[i]`` holds
``beta_{i+1}`` and ``alpha_bars[i]`` holds ``alpha_bar_{i+1}``; use
:meth:`NoiseSchedule.alpha_bar` to avoid off-by-one mistakes.  The cumulative
product *before* the first step (``alpha_bar_0``) is defined as exactly 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NoiseSchedule",
    "DDIMPlan",
    "make_noise_schedule",
    "forward_noise",
    "make_ddim_plan",
    "ddim_step",
    "sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta noise schedule with cached cumulative alpha products."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product alpha_bar_t for a 1-based timestep.

        ``t == 0`` is allowed and returns exactly 1.0 (the empty product).
        """
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


@dataclass(frozen=True)
class DDIMPlan:
    """A sub-sequence of timesteps and per-step noise scales for DDIM."""

    taus: np.ndarray
    sigmas: np.ndarray
    eta: float

    @property
    def num_steps(self) -> int:
        return int(self.taus.shape[0])


def make_noise_schedule(
    num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Build a linear beta schedule and its cumulative alpha products."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas, dtype=np.float64)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def forward_noise(
    clean: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Noise a clean latent to level ``t``:  sqrt(ab_t)*z + sqrt(1-ab_t)*eps."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs noise {noise.shape}")
    if not 1 <= t <= schedule.num_steps:
        raise ValueError(f"timestep {t} outside [1, {schedule.num_steps}]")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * noise


def make_ddim_plan(
    schedule: NoiseSchedule, num_steps: int, eta: float = 0.0
) -> DDIMPlan:
    """Pick ``num_steps`` evenly spaced timesteps ending at T, with noise scales.

    ``sigma_i = eta * sqrt((1-ab_prev)/(1-ab_i)) * sqrt(1 - ab_i/ab_prev)``
    where ``ab_prev`` is the cumulative product at the previous kept step
    (1.0 before the first).  With ``eta=1`` and ``num_steps=T`` the sigmas
    equal the ancestral-sampling posterior scales; ``eta=0`` is deterministic.
    """
    T = schedule.num_steps
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    taus = np.round(np.linspace(T / num_steps, T, num_steps)).astype(np.int64)
    # Spacing is T/num_steps >= 1 so rounding keeps the sequence strictly
    # increasing, and the endpoint is exactly T.
    sigmas = np.empty(num_steps, dtype=np.float64)
    for i in range(num_steps):
        ab_t = schedule.alpha_bar(int(taus[i]))
        ab_prev = schedule.alpha_bar(int(taus[i - 1])) if i > 0 else 1.0
        sigmas[i] = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(
            1.0 - ab_t / ab_prev
        )
    return DDIMPlan(taus=taus, sigmas=sigmas, eta=float(eta))


def ddim_step(
    z_tau: np.ndarray,
    z_hat: np.ndarray,
    index: int,
    plan: DDIMPlan,
    schedule: NoiseSchedule,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse step from ``plan.taus[index]`` to the previous kept step.

    Given the current latent and the model's clean estimate ``z_hat``, the
    implied noise is ``eps_hat = (z_tau - sqrt(ab_t) z_hat) / sqrt(1-ab_t)``
    and the update is
    ``sqrt(ab_prev) z_hat + sqrt(1-ab_prev-sigma^2) eps_hat + sigma * noise``.
    At ``index == 0`` the target level is 0 (ab_prev = 1), so with sigma = 0
    the step returns ``z_hat`` exactly.
    """
    z_tau = np.asarray(z_tau, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if not 0 <= index < plan.num_steps:
        raise ValueError(f"index {index} outside [0, {plan.num_steps})")
    t = int(plan.taus[index])
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(int(plan.taus[index - 1])) if index > 0 else 1.0
    sigma = float(plan.sigmas[index])

    eps_hat = (z_tau - np.sqrt(ab_t) * z_hat) / np.sqrt(1.0 - ab_t)
    out = np.sqrt(ab_prev) * z_hat + np.sqrt(1.0 - ab_prev - sigma**2) * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("sigma > 0 requires a noise array")
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != z_tau.shape:
            raise ValueError(
                f"shape mismatch: noise {noise.shape} vs latent {z_tau.shape}"
            )
        out = out + sigma * noise
    return out


def sample(
    predict_clean: Callable[[np.ndarray, np.ndarray, int], np.ndarray],
    z_cond: np.ndarray,
    plan: DDIMPlan,
    schedule: NoiseSchedule,
    seed: int,
) -> np.ndarray:
    """Run the full reverse process conditioned on ``z_cond``.

    ``predict_clean(z_t, z_cond, t)`` must return the clean-latent estimate at
    timestep ``t``.  The initial latent and any stochastic step noise are drawn
    from ``numpy.random.default_rng(seed)``, so equal seeds give bitwise-equal
    outputs for a deterministic predictor.
    """
    z_cond = np.asarray(z_cond, dtype=np.float64)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(z_cond.shape)
    for index in range(plan.num_steps - 1, -1, -1):
        t = int(plan.taus[index])
        z_hat = np.asarray(predict_clean(z, z_cond, t), dtype=np.float64)
        if z_hat.shape != z.shape:
            raise ValueError(
                f"predictor returned shape {z_hat.shape}, expected {z.shape}"
            )
        noise = (
            rng.standard_normal(z.shape) if float(plan.sigmas[index]) > 0.0 else None
        )
        z = ddim_step(z, z_hat, index, plan, schedule, noise=noise)
    return z
