"""Noise schedule, forward diffusion, and the deterministic reverse chain.

Conventions: ``alpha_bar[t]`` is the cumulative signal power at step t with
``alpha_bar[0] = 1``; the marginal of the forward process is

    x_t = alpha[t] * x_0 + sigma[t] * eps,    eps ~ N(0, I)

with ``alpha[t] = sqrt(alpha_bar[t])`` and ``sigma[t] = sqrt(1 - alpha_bar[t])``,
so ``alpha^2 + sigma^2 = 1`` at every step. The denoising network predicts
x_0 directly; the reverse chain is the deterministic (eta = 0) rule that
re-noises the current x_0 estimate to the previous step's level.

Schedule tables are precomputed in float64 and cast to the working dtype at
use sites to avoid cumulative-product drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigurationError, ContractViolation, NumericalError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-step coefficient tables, index 0..T inclusive."""

    T: int
    alpha_bar: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine"

    def validate(self) -> None:
        if self.alpha_bar[0] != 1.0:
            raise NumericalError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise NumericalError("alpha_bar must be strictly decreasing")
        if np.any(self.alpha_bar <= 0):
            raise NumericalError("alpha_bar must stay positive")
        identity_err = np.abs(self.alpha**2 + self.sigma**2 - 1.0).max()
        if identity_err > 1e-12:
            raise NumericalError(f"alpha^2 + sigma^2 deviates from 1 by {identity_err}")


def build_cosine_schedule(T: int, s: float = 0.008) -> DiffusionSchedule:
    """Cosine schedule: alpha_bar(t) = f(t/T) / f(0), f(u) = cos^2((u+s)/(1+s) * pi/2).

    Per-step betas derived from the raw curve are clamped to 0.999 before
    re-accumulating, which keeps alpha_bar strictly positive at t = T.
    """
    if T < 1:
        raise ConfigurationError(f"step count must be >= 1, got {T}")
    if not 0.0 < s < 1.0:
        raise ConfigurationError(f"offset s must lie in (0, 1), got {s}")
    u = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2
    ab_raw = f / f[0]
    betas = 1.0 - ab_raw[1:] / ab_raw[:-1]
    betas = np.clip(betas, 0.0, 0.999)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    sched = DiffusionSchedule(
        T=T,
        alpha_bar=alpha_bar,
        alpha=np.sqrt(alpha_bar),
        sigma=np.sqrt(1.0 - alpha_bar),
        kind="cosine",
    )
    sched.validate()
    return sched


@dataclass
class NoisySample:
    """A diffused sample together with the step and realized noise."""

    x_t: torch.Tensor
    t: int | torch.Tensor
    eps: torch.Tensor


def _coeff(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Look up per-step coefficients and shape them to broadcast over ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        values = torch.as_tensor(table, dtype=like.dtype, device=like.device)[t]
        return values.reshape(t.shape + (1,) * (like.ndim - t.ndim))
    return torch.as_tensor(float(table[int(t)]), dtype=like.dtype, device=like.device)


def forward_diffuse(
    x0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule
) -> NoisySample:
    """Diffuse clean data to step t: x_t = alpha[t] * x0 + sigma[t] * eps.

    t may be an int (shared step) or an integer tensor of per-sample steps
    broadcastable against the leading dimensions of x0. At t = 0 the clean
    input is returned bit-exactly.
    """
    if x0.shape != eps.shape:
        raise ContractViolation(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    _check_range(t, sched.T)
    if not isinstance(t, torch.Tensor) and int(t) == 0:
        return NoisySample(x_t=x0.clone(), t=0, eps=eps)
    x_t = _coeff(sched.alpha, t, x0) * x0 + _coeff(sched.sigma, t, x0) * eps
    if isinstance(t, torch.Tensor) and t.ndim > 0 and bool((t == 0).any()):
        clean = (t == 0).reshape(t.shape + (1,) * (x0.ndim - t.ndim))
        x_t = torch.where(clean, x0, x_t)
    return NoisySample(x_t=x_t, t=t, eps=eps)


def _check_range(t, T: int) -> None:
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < 0 or hi > T:
        raise ContractViolation(f"step {lo}..{hi} outside [0, {T}]")


def ddim_step(
    x_t: torch.Tensor,
    x0_pred: torch.Tensor,
    t: int,
    t_prev: int,
    sched: DiffusionSchedule,
    eta: float = 0.0,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse step from level t to t_prev given the x_0 prediction.

    The noise implied by the current state, eps = (x_t - alpha[t] x0) / sigma[t],
    is carried to the previous level: x_prev = alpha[t_prev] x0 + sigma' eps,
    where sigma' shrinks toward sigma[t_prev] as eta goes to 0. t_prev = 0
    returns the prediction exactly.
    """
    if not 0 <= t_prev < t <= sched.T:
        raise ContractViolation(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ContractViolation(f"eta must lie in [0, 1], got {eta}")
    sigma_t = float(sched.sigma[t])
    if sigma_t == 0.0:
        raise NumericalError(f"sigma[{t}] = 0: schedule degenerate at t > 0")
    if t_prev == 0:
        return x0_pred.clone()

    eps_implied = (x_t - _coeff(sched.alpha, t, x_t) * x0_pred) / _coeff(
        sched.sigma, t, x_t
    )
    alpha_prev = _coeff(sched.alpha, t_prev, x_t)
    sigma_prev = float(sched.sigma[t_prev])
    if eta == 0.0:
        return alpha_prev * x0_pred + sigma_prev * eps_implied

    ab_t, ab_prev = float(sched.alpha_bar[t]), float(sched.alpha_bar[t_prev])
    sigma_noise = (
        eta
        * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
        * math.sqrt(max(1.0 - ab_t / ab_prev, 0.0))
    )
    direction = math.sqrt(max(sigma_prev**2 - sigma_noise**2, 0.0))
    if noise is None:
        noise = torch.randn_like(x_t)
    return alpha_prev * x0_pred + direction * eps_implied + sigma_noise * noise


def ddim_timesteps(T: int, n_steps: int | None = None) -> list[int]:
    """Descending step subsequence T = tau_n > ... > tau_1 > tau_0 = 0."""
    if n_steps is None:
        n_steps = T
    if not 1 <= n_steps <= T:
        raise ConfigurationError(f"n_steps must lie in [1, {T}], got {n_steps}")
    taus = np.unique(np.round(np.linspace(0, T, n_steps + 1)).astype(int))
    return [int(t) for t in taus[::-1]]


def sample_chain(
    denoiser: Callable,
    cond: tuple,
    shape: tuple[int, ...],
    sched: DiffusionSchedule,
    n_steps: int | None = None,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    x_init: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run the reverse chain from Gaussian noise to a clean estimate.

    ``denoiser(x_t, t, c, features) -> x0 prediction`` supplies the model;
    ``cond`` is the (c, features) pair passed through unchanged. With eta = 0
    the chain is a deterministic function of the initial noise, so a fixed
    generator (or x_init) reproduces the output bit-exactly.
    """
    c, features = cond if cond is not None else (None, None)
    if x_init is not None:
        x = x_init.clone()
    else:
        x = torch.randn(shape, generator=generator, dtype=dtype)
    taus = ddim_timesteps(sched.T, n_steps)
    for t, t_prev in zip(taus[:-1], taus[1:]):
        x0_pred = denoiser(x, t, c, features)
        if x0_pred.shape != x.shape:
            raise ContractViolation(
                f"denoiser returned shape {tuple(x0_pred.shape)}, expected {tuple(x.shape)}"
            )
        noise = None
        if eta > 0.0 and t_prev > 0:
            noise = torch.randn(shape, generator=generator, dtype=dtype)
        x = ddim_step(x, x0_pred, t, t_prev, sched, eta=eta, noise=noise)
    return x
