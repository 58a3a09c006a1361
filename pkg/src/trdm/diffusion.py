"""DDPM machinery shared by the prediction and super-resolution stages.

Forward process (closed form, 1-based timestep t):
    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps

Reverse (ancestral) step with sigma_t^2 = beta_t:
    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z

t = 0 denotes clean data; valid diffusion steps are 1..T.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete beta / alpha / alpha-bar sequences, stored 0-based."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def step_count(self) -> int:
        return len(self.betas)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.step_count:
            raise ValueError(f"timestep {t} outside [1, {self.step_count}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_t(t) - 1])

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        return cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls.from_betas(d["betas"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return np.array_equal(self.betas, other.betas)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _coef(values: np.ndarray, t, like):
    """Gather schedule values at 1-based ``t`` shaped to broadcast over ``like``.

    ``t`` is an int or a per-item 1-D array over the leading axis.
    """
    if isinstance(t, (int, np.integer)):
        v = values[int(t) - 1]
        return v if isinstance(like, np.ndarray) else torch.as_tensor(v, dtype=like.dtype)
    if isinstance(t, torch.Tensor):
        idx = t.detach().cpu().long().numpy()
    else:
        idx = np.asarray(t, dtype=np.int64)
    v = values[idx - 1].reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, np.ndarray):
        return v
    return torch.as_tensor(v, dtype=like.dtype, device=like.device)


def _check_t_any(t, schedule: NoiseSchedule):
    if isinstance(t, (int, np.integer)):
        schedule.check_t(t)
        return
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.ndim != 1:
        raise ValueError("per-item timesteps must be a 1-D array")
    if arr.size and (arr.min() < 1 or arr.max() > schedule.step_count):
        raise ValueError(f"timesteps outside [1, {schedule.step_count}]")


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """Corrupt ``x0`` to step ``t`` with the given noise (numpy or torch)."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"noise shape {tuple(eps.shape)} != state shape {tuple(x0.shape)}")
    _check_t_any(t, schedule)
    abar = _coef(schedule.alpha_bars, t, x0)
    if isinstance(x0, np.ndarray):
        return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def ddpm_step(x_t, t: int, eps_hat, schedule: NoiseSchedule, z):
    """One ancestral reverse step from ``t`` to ``t - 1``.

    ``z`` is ignored at t = 1, where the deterministic mean is returned.
    """
    t = schedule.check_t(t)
    if tuple(x_t.shape) != tuple(eps_hat.shape):
        raise ValueError(
            f"eps_hat shape {tuple(eps_hat.shape)} != state shape {tuple(x_t.shape)}"
        )
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    abar = schedule.alpha_bars[t - 1]
    mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    if tuple(z.shape) != tuple(x_t.shape):
        raise ValueError(f"z shape {tuple(z.shape)} != state shape {tuple(x_t.shape)}")
    return mean + math.sqrt(beta) * z


Denoiser = Callable[[torch.Tensor, int, Any], torch.Tensor]


def clip_denoised_eps(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, schedule: NoiseSchedule,
                      bound: float = 1.0) -> torch.Tensor:
    """Noise estimate re-derived from the implied x0 clamped to [-bound, bound].

    Unchanged whenever the implied x0 is already in range.
    """
    abar = schedule.alpha_bar(t)
    x0 = ((x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)).clamp(-bound, bound)
    return (x_t - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    condition: Any,
    shape,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    dtype: torch.dtype = torch.float32,
    clip_x0: float | None = None,
) -> torch.Tensor:
    """Full T -> 1 ancestral sampling loop starting from standard normal noise.

    ``denoiser(x, t, condition)`` must return an array shaped like ``x``.
    All randomness is drawn from ``rng``. With ``clip_x0`` each noise
    estimate is first passed through :func:`clip_denoised_eps`, which keeps
    briefly trained models from drifting off the data range.
    """
    shape = tuple(shape)
    x = torch.randn(shape, generator=rng, dtype=dtype)
    for t in range(schedule.step_count, 0, -1):
        eps_hat = denoiser(x, t, condition)
        if tuple(eps_hat.shape) != shape:
            raise ValueError(
                f"denoiser returned shape {tuple(eps_hat.shape)} at t={t}, expected {shape}"
            )
        if clip_x0 is not None:
            eps_hat = clip_denoised_eps(x, t, eps_hat, schedule, clip_x0)
        z = torch.randn(shape, generator=rng, dtype=dtype) if t > 1 else None
        x = ddpm_step(x, t, eps_hat, schedule, z)
    return x


def timestep_embedding(t, dim: int):
    """Sinusoidal embedding: ``dim // 2`` sines then ``dim // 2`` cosines.

    Frequencies are log-spaced from 1 down to 1/10000. ``t`` may be a scalar
    (returns shape ``(dim,)``) or a 1-D tensor/array (returns ``(len(t), dim)``).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be even and positive, got {dim}")
    half = dim // 2
    if isinstance(t, torch.Tensor):
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
        )
        args = t.to(torch.float64).reshape(-1, 1) * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return emb if t.ndim else emb[0]
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t_arr.reshape(-1, 1) * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return emb if t_arr.ndim else emb[0]


def l1_eps_loss(eps, eps_hat):
    """Mean absolute difference between true and predicted noise."""
    if tuple(eps.shape) != tuple(eps_hat.shape):
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    if isinstance(eps, torch.Tensor) or isinstance(eps_hat, torch.Tensor):
        return (torch.as_tensor(eps) - torch.as_tensor(eps_hat)).abs().mean()
    return float(np.mean(np.abs(np.asarray(eps) - np.asarray(eps_hat))))
