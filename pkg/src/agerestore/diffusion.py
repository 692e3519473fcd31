"""Noise schedule, forward process and deterministic DDIM stepping.

Index convention: arrays are indexed by timestep 0..T with ``alpha_bar[0] = 1``
(the clean sample), so ``alpha_bar[t]`` is directly the cumulative product
for timestep ``t``.

    z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
    eps = -sigma_t * grad log p_t(z_t)
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import Tensor


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep ordering."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: Tensor  # (T+1,), beta[0] = 0
    alpha_step: Tensor
    alpha_bar: Tensor
    sigma: Tensor

    def coefficients(self, t, like: Tensor) -> tuple[Tensor, Tensor]:
        """(sqrt(abar_t), sqrt(1-abar_t)) broadcastable against ``like``."""
        abar = self.alpha_bar.to(like.dtype)[_as_index(t)]
        if abar.ndim == 1:
            abar = abar.view(-1, *([1] * (like.ndim - 1)))
        return abar.sqrt(), (1 - abar).sqrt()

    def digest(self) -> str:
        data = self.beta.numpy().tobytes()
        return hashlib.sha256(data).hexdigest()[:16]


def _as_index(t):
    if isinstance(t, Tensor):
        return t.long()
    return int(t)


def make_noise_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02,
                        kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = torch.zeros(T + 1, dtype=torch.float64)
    beta[1:] = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    alpha_step = 1 - beta
    alpha_bar = torch.cumprod(alpha_step, 0)
    sigma = (1 - alpha_bar).sqrt()
    return NoiseSchedule(T, beta, alpha_step, alpha_bar, sigma)


def ddim_timesteps(schedule: NoiseSchedule, num_steps: int) -> list[int]:
    """Uniform stride from T down to a final step landing on 0.

    Returns ``num_steps + 1`` values, e.g. T=1000, 50 steps -> [1000, 980, ..., 20, 0].
    """
    if not 1 <= num_steps <= schedule.T:
        raise ScheduleError(f"num_steps must be in [1, {schedule.T}]")
    ts = [round(schedule.T - i * schedule.T / num_steps) for i in range(num_steps + 1)]
    return ts


def _check_shapes(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(x0: Tensor, t, noise: Tensor, s: NoiseSchedule) -> Tensor:
    _check_shapes(x0, noise)
    _check_t(t, s, allow_zero=False)
    a, b = s.coefficients(t, x0)
    return a * x0 + b * noise


def _check_t(t, s: NoiseSchedule, allow_zero: bool):
    lo = 0 if allow_zero else 1
    if isinstance(t, Tensor):
        bad = (t < lo).any() or (t > s.T).any()
    else:
        bad = not lo <= t <= s.T
    if bad:
        raise ScheduleError(f"timestep out of range [{lo}, {s.T}]")


def predict_x0(z_t: Tensor, eps: Tensor, t, s: NoiseSchedule) -> Tensor:
    a, b = s.coefficients(t, z_t)
    return (z_t - b * eps) / a


def ddim_step(z_t: Tensor, eps_pred: Tensor, t: int, t_prev: int, s: NoiseSchedule) -> Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    z_prev = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps_pred
    """
    _check_shapes(z_t, eps_pred)
    if not 0 <= t_prev < t <= s.T:
        raise ScheduleError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(z_t, eps_pred, t, s)
    a_prev, b_prev = s.coefficients(t_prev, z_t)
    return a_prev * x0 + b_prev * eps_pred


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, scale: float) -> Tensor:
    _check_shapes(eps_uncond, eps_cond)
    if scale == 1:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def analytic_gaussian_eps(z_t: Tensor, t, mu: Tensor, var0: float, s: NoiseSchedule) -> Tensor:
    """Optimal eps-predictor when the data distribution is N(mu, var0 * I)."""
    if var0 < 0:
        raise ValueError(f"var0 must be non-negative, got {var0}")
    a, b = s.coefficients(t, z_t)
    abar = a * a
    return b * (z_t - a * mu) / (abar * var0 + 1 - abar)


def gaussian_log_density(z_t: Tensor, t: int, mu: Tensor, var0: float, s: NoiseSchedule) -> Tensor:
    """log p_t(z_t) for data N(mu, var0 I); marginal is N(sqrt(abar) mu, (abar var0 + 1 - abar) I)."""
    a, _ = s.coefficients(t, z_t)
    var = a * a * var0 + 1 - a * a
    d = z_t - a * mu
    return -0.5 * (d * d).sum() / var - 0.5 * z_t.numel() * torch.log(2 * math.pi * var)


class AnalyticGaussianModel:
    """Closed-form eps-predictor keyed by prompt: each prompt maps to a Gaussian mean.

    Stand-in for the learned denoiser in sampler and guidance tests. Identity
    tokens and structural features are ignored.
    """

    def __init__(self, means: dict[tuple, Tensor], var0: float, schedule: NoiseSchedule,
                 default: Tensor | None = None):
        self.means = {tuple(k): v for k, v in means.items()}
        self.var0 = var0
        self.schedule = schedule
        self.default = default

    def mean_for(self, prompt) -> Tensor:
        key = tuple(int(x) for x in prompt)
        if key in self.means:
            return self.means[key]
        if self.default is None:
            raise KeyError(f"no mean registered for prompt {key}")
        return self.default

    def predict_eps(self, z_t: Tensor, t, cond) -> Tensor:
        mu = self.mean_for(cond.prompt_tokens)
        return analytic_gaussian_eps(z_t, t, mu.to(z_t.dtype), self.var0, self.schedule)
