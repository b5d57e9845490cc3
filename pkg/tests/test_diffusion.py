import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mri2pet.diffusion import (
    DiffusionSchedule,
    build_cosine_schedule,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    sample_chain,
)
from mri2pet.errors import ConfigurationError, ContractViolation, NumericalError

# f(0.5)/f(0) for s = 0.008, evaluated with 40-digit arithmetic (mpmath).
ALPHA_BAR_T4_MID = 0.49384359044063771332


def schedule_invariants(sched: DiffusionSchedule):
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(sched.alpha_bar > 0)
    assert sched.alpha_bar[-1] < 1e-3
    assert np.abs(sched.alpha**2 + sched.sigma**2 - 1.0).max() <= 1e-12


@pytest.mark.parametrize("T", [4, 100, 1000])
def test_cosine_schedule_invariants(T):
    schedule_invariants(build_cosine_schedule(T))


def test_cosine_schedule_frozen_midpoint():
    sched = build_cosine_schedule(4, s=0.008)
    assert sched.alpha_bar[2] == pytest.approx(ALPHA_BAR_T4_MID, abs=1e-12)


def test_cosine_schedule_endpoint_is_tiny():
    sched = build_cosine_schedule(1000)
    assert sched.alpha_bar[1000] < 1e-3


@pytest.mark.parametrize("bad", [dict(T=0), dict(T=10, s=0.0), dict(T=10, s=1.5)])
def test_cosine_schedule_rejects_bad_args(bad):
    with pytest.raises(ConfigurationError):
        build_cosine_schedule(**bad)


@given(T=st.integers(min_value=2, max_value=400), s=st.floats(0.001, 0.2))
@settings(max_examples=25, deadline=None)
def test_cosine_schedule_property(T, s):
    sched = build_cosine_schedule(T, s)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.abs(sched.alpha**2 + sched.sigma**2 - 1.0).max() <= 1e-12


def test_forward_diffuse_t0_bit_exact():
    sched = build_cosine_schedule(100)
    x0 = torch.randn(2, 3, 8, 8) * 1e3
    eps = torch.randn_like(x0)
    out = forward_diffuse(x0, 0, eps, sched)
    assert torch.equal(out.x_t, x0)


def test_forward_diffuse_zero_noise_scales_signal():
    sched = build_cosine_schedule(100)
    x0 = torch.randn(4, 8, 8, dtype=torch.float64)
    for t in (1, 50, 100):
        out = forward_diffuse(x0, t, torch.zeros_like(x0), sched)
        assert torch.allclose(out.x_t, float(sched.alpha[t]) * x0)


def test_forward_diffuse_hand_coefficients():
    # alpha_bar = 0.25 -> x_t = (0.5 + sqrt(0.75)) for unit signal and noise
    alpha_bar = np.array([1.0, 0.25])
    sched = DiffusionSchedule(
        T=1, alpha_bar=alpha_bar, alpha=np.sqrt(alpha_bar), sigma=np.sqrt(1 - alpha_bar)
    )
    ones = torch.ones(2, 2, dtype=torch.float64)
    out = forward_diffuse(ones, 1, ones, sched)
    expected = 0.5 + np.sqrt(0.75)
    assert torch.allclose(out.x_t, torch.full((2, 2), expected, dtype=torch.float64))


def test_forward_diffuse_shape_mismatch():
    sched = build_cosine_schedule(10)
    with pytest.raises(ContractViolation):
        forward_diffuse(torch.zeros(2, 2), 1, torch.zeros(3, 2), sched)


def test_forward_diffuse_vector_t():
    sched = build_cosine_schedule(100)
    x0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([0, 7, 100])
    out = forward_diffuse(x0, t, eps, sched)
    assert torch.equal(out.x_t[0], x0[0])
    for i, ti in enumerate((0, 7, 100)):
        single = forward_diffuse(x0[i], ti, eps[i], sched).x_t
        assert torch.allclose(out.x_t[i], single)


def test_forward_diffuse_round_trip_all_t():
    sched = build_cosine_schedule(200)
    x0 = torch.randn(4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    for t in range(0, 201, 10):
        noisy = forward_diffuse(x0, t, eps, sched)
        recovered = (noisy.x_t - float(sched.sigma[t]) * eps) / float(sched.alpha[t])
        assert torch.allclose(recovered, x0, atol=1e-10)


def test_ddim_step_terminal_returns_prediction():
    sched = build_cosine_schedule(50)
    x_t = torch.randn(2, 4, 4)
    x0_pred = torch.randn(2, 4, 4)
    out = ddim_step(x_t, x0_pred, 5, 0, sched)
    assert torch.equal(out, x0_pred)


def test_ddim_step_implied_noise_inverts_forward():
    sched = build_cosine_schedule(100)
    x0 = torch.randn(3, 5, 5, dtype=torch.float64)
    eps = torch.randn_like(x0)
    for t in (1, 30, 100):
        noisy = forward_diffuse(x0, t, eps, sched)
        implied = (noisy.x_t - float(sched.alpha[t]) * x0) / float(sched.sigma[t])
        assert torch.allclose(implied, eps, atol=1e-10)


def test_ddim_step_rejects_degenerate_sigma():
    alpha_bar = np.array([1.0, 1.0 - 1e-18, 0.5])  # sigma[1] underflows to 0
    alpha_bar[1] = 1.0
    sched = DiffusionSchedule(
        T=2, alpha_bar=alpha_bar, alpha=np.sqrt(alpha_bar), sigma=np.sqrt(1 - alpha_bar)
    )
    with pytest.raises(NumericalError):
        ddim_step(torch.zeros(2), torch.zeros(2), 1, 0, sched)


def test_ddim_step_argument_contracts():
    sched = build_cosine_schedule(10)
    x = torch.zeros(2)
    with pytest.raises(ContractViolation):
        ddim_step(x, x, 3, 3, sched)
    with pytest.raises(ContractViolation):
        ddim_step(x, x, 3, 1, sched, eta=1.5)


def test_ddim_timesteps_endpoints():
    taus = ddim_timesteps(1000, 50)
    assert taus[0] == 1000 and taus[-1] == 0
    assert all(a > b for a, b in zip(taus, taus[1:]))
    assert ddim_timesteps(10) == list(range(10, -1, -1))


@pytest.mark.parametrize("n_steps", [50, 1000])
def test_oracle_chain_recovers_x0(n_steps):
    sched = build_cosine_schedule(1000)
    gen = torch.Generator().manual_seed(99)
    x0 = torch.rand(1, 1, 16, 16, generator=gen) * 2 - 1

    def oracle(x_t, t, c, features):
        return x0.clone()

    out = sample_chain(
        oracle, (None, None), tuple(x0.shape), sched, n_steps=n_steps,
        generator=torch.Generator().manual_seed(7),
    )
    assert float((out - x0).abs().max()) < 1e-5


def test_chain_deterministic_for_fixed_seed():
    sched = build_cosine_schedule(100)
    x0 = torch.randn(2, 4, 4)

    def oracle(x_t, t, c, features):
        return x0

    outs = [
        sample_chain(
            oracle, (None, None), tuple(x0.shape), sched, n_steps=10,
            generator=torch.Generator().manual_seed(5),
        )
        for _ in range(2)
    ]
    assert torch.equal(outs[0], outs[1])


def test_chain_step_count_consistency_with_oracle():
    sched = build_cosine_schedule(1000)
    x0 = torch.rand(1, 2, 8, 8) * 2 - 1

    def oracle(x_t, t, c, features):
        return x0

    results = [
        sample_chain(
            oracle, (None, None), tuple(x0.shape), sched, n_steps=n,
            generator=torch.Generator().manual_seed(3),
        )
        for n in (50, 1000)
    ]
    assert float((results[0] - results[1]).abs().max()) < 1e-5


def test_chain_rejects_denoiser_shape_mismatch():
    sched = build_cosine_schedule(10)

    def bad(x_t, t, c, features):
        return torch.zeros(1, 3, 3)

    with pytest.raises(ContractViolation):
        sample_chain(bad, (None, None), (1, 2, 2), sched, n_steps=5,
                     generator=torch.Generator().manual_seed(0))


def test_eta_chain_uses_noise_and_stays_finite():
    sched = build_cosine_schedule(100)
    x0 = torch.zeros(1, 4, 4)

    def oracle(x_t, t, c, features):
        return x0

    out = sample_chain(
        oracle, (None, None), (1, 4, 4), sched, n_steps=20, eta=1.0,
        generator=torch.Generator().manual_seed(11),
    )
    assert torch.isfinite(out).all()
    # terminal step still returns the prediction exactly
    assert torch.equal(out, x0)
