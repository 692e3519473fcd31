import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from agerestore.denoiser import ConditionBundle
from agerestore.diffusion import (AnalyticGaussianModel, ScheduleError, analytic_gaussian_eps, cfg_combine,
                                  ddim_step, ddim_timesteps, forward_diffuse, gaussian_log_density,
                                  make_noise_schedule, predict_x0)


def test_schedule_endpoints(schedule):
    assert schedule.alpha_bar[0] == 1.0
    assert torch.isclose(schedule.beta[1], torch.tensor(1e-4, dtype=torch.float64))
    assert torch.isclose(schedule.beta[-1], torch.tensor(0.02, dtype=torch.float64))
    # independent product of (1 - beta) in plain Python
    prod = 1.0
    for k in range(1, 1001):
        prod *= 1 - (1e-4 + (0.02 - 1e-4) * (k - 1) / 999)
    assert math.isclose(schedule.alpha_bar[1000].item(), prod, rel_tol=1e-9)
    assert schedule.alpha_bar[1000] < 1e-4


def test_schedule_rejects_bad_params():
    with pytest.raises(ScheduleError):
        make_noise_schedule(T=1)
    with pytest.raises(ScheduleError):
        make_noise_schedule(beta_min=0.1, beta_max=0.01)
    with pytest.raises(ScheduleError):
        make_noise_schedule(kind="cosine")


def test_ddim_stride(schedule):
    steps = ddim_timesteps(schedule, 50)
    assert steps[0] == 1000 and steps[-1] == 0 and len(steps) == 51
    assert all(a - b == 20 for a, b in zip(steps, steps[1:]))


@given(t=st.integers(1, 1000), seed=st.integers(0, 2**16))
def test_forward_then_predict_x0_inverts(t, seed):
    s = make_noise_schedule()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    z = forward_diffuse(x0, t, eps, s)
    tol = 1e-6 / max(s.alpha_bar[t].sqrt().item(), 1e-3)
    assert torch.allclose(predict_x0(z, eps, t, s), x0, atol=tol)


@given(t=st.integers(2, 1000), data=st.data())
def test_ddim_step_with_true_noise_follows_noiseless_trajectory(t, data):
    s = make_noise_schedule()
    t_prev = data.draw(st.integers(0, t - 1))
    g = torch.Generator().manual_seed(t)
    x0 = torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    z_prev = ddim_step(forward_diffuse(x0, t, eps, s), eps, t, t_prev, s)
    expect = x0 if t_prev == 0 else forward_diffuse(x0, t_prev, eps, s)
    assert torch.allclose(z_prev, expect, atol=1e-6)


def test_ddim_step_rejects_bad_order(schedule):
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ScheduleError):
        ddim_step(z, z, 10, 20, schedule)
    with pytest.raises(ScheduleError):
        ddim_step(z, z, 1001, 0, schedule)


def test_cfg_combine_scale_one_returns_conditional():
    u, c = torch.randn(3, 4), torch.randn(3, 4)
    assert cfg_combine(u, c, 1.0) is c
    assert torch.allclose(cfg_combine(u, c, 4.0), u + 4 * (c - u))
    assert torch.equal(cfg_combine(u, c, 0.0), u)


@given(var0=st.floats(0.0, 3.0), t=st.integers(1, 1000))
def test_analytic_eps_matches_score(var0, t):
    s = make_noise_schedule()
    g = torch.Generator().manual_seed(t)
    mu = torch.randn(6, generator=g, dtype=torch.float64)
    z = torch.randn(6, generator=g, dtype=torch.float64).requires_grad_(True)
    logp = gaussian_log_density(z, t, mu, var0, s)
    (score,) = torch.autograd.grad(logp, z)
    sigma = s.sigma[t]
    assert torch.allclose(analytic_gaussian_eps(z.detach(), t, mu, var0, s), -sigma * score, rtol=1e-9, atol=1e-12)


def test_analytic_eps_rejects_negative_variance(schedule):
    with pytest.raises(ValueError):
        analytic_gaussian_eps(torch.zeros(2), 5, torch.zeros(2), -1.0, schedule)


def test_analytic_model_looks_up_prompt(schedule):
    m = AnalyticGaussianModel({(1, 2): torch.ones(3)}, 0.0, schedule)
    z = torch.zeros(3)
    eps = m.predict_eps(z, 10, ConditionBundle(torch.tensor([1, 2])))
    assert torch.allclose(eps, analytic_gaussian_eps(z, 10, torch.ones(3), 0.0, schedule))
    with pytest.raises(KeyError):
        m.predict_eps(z, 10, ConditionBundle(torch.tensor([3])))
