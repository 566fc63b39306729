"""Noise schedule, forward noising, guidance and the deterministic DDIM sampler.

All samplers here work on arrays with an optional leading batch axis. A
denoiser is any callable ``denoiser(y, cond, gamma) -> eps`` taking batched
``(B, n_ch, h, w)`` noisy images, ``(B, 2 n_ch, h, w)`` conditions and a
``(B,)`` vector of noise levels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    gamma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.gamma)

    @property
    def snr(self) -> np.ndarray:
        return self.gamma / (1.0 - self.gamma)


@dataclass(frozen=True)
class GuidanceConfig:
    omega_uncond: float = 1.0
    null_value: float = -2.0

    def __post_init__(self):
        if -1.0 <= self.null_value <= 1.0:
            raise ValueError(f"null_value {self.null_value} overlaps the whitened range [-1, 1]")


def cosine_schedule(T: int = 1024) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    t = np.arange(T, dtype=np.float64)
    gamma = np.cos((t / T + 0.008) / 1.008 * np.pi / 2) ** 2
    return NoiseSchedule(gamma)


def _same_shape(a, b, what: str):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_diffuse(y0, eps, gamma):
    """``sqrt(gamma) y0 + sqrt(1 - gamma) eps``; gamma may be per batch item."""
    _same_shape(y0, eps, "forward_diffuse")
    y0 = np.asarray(y0)
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0) or np.any(gamma > 1):
        raise ValueError("gamma must lie in [0, 1]")
    g = gamma.reshape(gamma.shape + (1,) * (y0.ndim - gamma.ndim))
    out = np.sqrt(g) * y0 + np.sqrt(1.0 - g) * np.asarray(eps)
    return out.astype(y0.dtype, copy=False)


def cfg_epsilon(eps_cond, eps_uncond, omega: float):
    _same_shape(eps_cond, eps_uncond, "cfg_epsilon")
    eps_cond = np.asarray(eps_cond)
    return eps_cond + omega * (eps_cond - np.asarray(eps_uncond))


def ddim_step(y_t, eps_hat, gamma_t: float, gamma_prev: float):
    """One eta = 0 DDIM update. Returns ``(y_prev, x0_hat)``."""
    _same_shape(y_t, eps_hat, "ddim_step")
    if not gamma_t > 0:
        raise ValueError("gamma_t must be positive")
    if not (0 < gamma_prev <= 1) or gamma_t > 1:
        raise ValueError("noise levels must lie in (0, 1]")
    if gamma_prev < gamma_t:
        raise ValueError("gamma_prev must not be noisier than gamma_t")
    x0 = (y_t - np.sqrt(1.0 - gamma_t) * eps_hat) / np.sqrt(gamma_t)
    x0 = np.clip(x0, -1.0, 1.0)
    y_prev = np.sqrt(gamma_prev) * x0 + np.sqrt(1.0 - gamma_prev) * eps_hat
    return y_prev, x0


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """``n_steps`` evenly spaced indices from ``T - 1`` down towards 0."""
    if n_steps < 1 or n_steps > T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    k = np.arange(n_steps)
    return ((n_steps - k) * (T - 1)) // n_steps


def null_condition(shape, null_value: float = -2.0, dtype=np.float32) -> np.ndarray:
    return np.full(shape, null_value, dtype=dtype)


def guided_epsilon(denoiser: Denoiser, y, x, gamma: float, guidance: GuidanceConfig):
    """Classifier-free-guided noise estimate for a batch ``y`` under condition ``x``."""
    b = y.shape[0]
    g = np.full(b, gamma)
    if guidance.omega_uncond == 0:
        return denoiser(y, x, g)
    null = null_condition(x.shape, guidance.null_value, x.dtype)
    both = denoiser(np.concatenate([y, y]), np.concatenate([x, null]), np.concatenate([g, g]))
    return cfg_epsilon(both[:b], both[b:], guidance.omega_uncond)


def ddim_sample(
    denoiser: Denoiser,
    eps_T,
    x,
    n_steps: int,
    guidance: GuidanceConfig = GuidanceConfig(),
    schedule: NoiseSchedule | None = None,
) -> np.ndarray:
    """Deterministic reverse diffusion from ``eps_T`` conditioned on ``x``.

    ``eps_T`` may be ``(n_ch, h, w)`` or a batch ``(B, n_ch, h, w)``; ``x``
    is broadcast over the batch. Returns the final clamped ``x0`` estimate.
    """
    schedule = schedule or cosine_schedule()
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    eps_T = np.asarray(eps_T, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    single = eps_T.ndim == 3
    y = eps_T[None] if single else eps_T
    if x.ndim == 3:
        x = np.broadcast_to(x, (y.shape[0],) + x.shape)
    steps = ddim_timesteps(schedule.T, n_steps)
    gam = schedule.gamma
    x0 = y
    for i, t in enumerate(steps):
        g_t = float(gam[t])
        g_prev = float(gam[steps[i + 1]]) if i + 1 < len(steps) else float(gam[0])
        eps_hat = guided_epsilon(denoiser, y, x, g_t, guidance)
        y, x0 = ddim_step(y, eps_hat, g_t, g_prev)
        y = y.astype(np.float32)
    x0 = x0.astype(np.float32)
    return x0[0] if single else x0
