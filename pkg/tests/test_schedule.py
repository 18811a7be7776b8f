"""Schedule and DDIM tests.

The expected values here are produced by independent routes: an explicit
loop-product for the cumulative alphas, hand-checked scalar arithmetic for the
reverse step, and the classic ancestral-sampling posterior formulas for the
eta=1 equivalence.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deshadow.schedule import (
    ddim_step,
    forward_noise,
    make_ddim_plan,
    make_noise_schedule,
    sample,
)


def loop_alpha_bars(betas):
    """Oracle: cumulative products via an explicit python loop."""
    out = []
    acc = 1.0
    for b in betas:
        acc *= 1.0 - float(b)
        out.append(acc)
    return np.array(out, dtype=np.float64)


def test_alpha_bars_match_loop_product_default_schedule():
    sched = make_noise_schedule(1000)
    expected = loop_alpha_bars(sched.betas)
    assert np.max(np.abs(sched.alpha_bars - expected)) <= 1e-12


def test_alpha_bars_fixed_small_example():
    sched = make_noise_schedule(3, 0.1, 0.3)
    assert np.allclose(sched.betas, [0.1, 0.2, 0.3], atol=1e-15)
    assert np.allclose(sched.alpha_bars, [0.9, 0.72, 0.504], atol=1e-12)


def test_alpha_bars_monotone_and_bounded():
    sched = make_noise_schedule(500, 1e-4, 0.05)
    assert np.all(sched.alpha_bars > 0.0)
    assert np.all(sched.alpha_bars < 1.0)
    assert np.all(np.diff(sched.alpha_bars) < 0.0)


def test_alpha_bar_boundary_convention():
    sched = make_noise_schedule(10)
    assert sched.alpha_bar(0) == 1.0
    assert sched.alpha_bar(1) == pytest.approx(1.0 - sched.betas[0], abs=1e-15)
    with pytest.raises(ValueError):
        sched.alpha_bar(11)
    with pytest.raises(ValueError):
        sched.alpha_bar(-1)


def test_make_noise_schedule_rejects_bad_args():
    with pytest.raises(ValueError):
        make_noise_schedule(0)
    with pytest.raises(ValueError):
        make_noise_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        make_noise_schedule(10, 0.0, 0.1)
    with pytest.raises(ValueError):
        make_noise_schedule(10, 0.1, 1.0)


def test_forward_noise_zero_noise_scales_clean():
    sched = make_noise_schedule(100)
    z = np.arange(12, dtype=np.float64).reshape(3, 4) / 6.0 - 1.0
    out = forward_noise(z, 7, np.zeros_like(z), sched)
    assert np.allclose(out, math.sqrt(sched.alpha_bar(7)) * z, atol=1e-15)


def test_forward_noise_approaches_pure_noise_at_depth():
    # With large betas alpha_bar_T is tiny, so the output is nearly eps.
    sched = make_noise_schedule(10, 0.5, 0.99)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((8, 8))
    eps = rng.standard_normal((8, 8))
    out = forward_noise(z, 10, eps, sched)
    bound = math.sqrt(sched.alpha_bar(10)) * np.max(np.abs(z)) + 1e-12
    assert np.max(np.abs(out - eps)) <= bound + math.sqrt(sched.alpha_bar(10))


def test_forward_noise_monte_carlo_moments():
    sched = make_noise_schedule(1000)
    t = 600
    ab = sched.alpha_bar(t)
    z = np.array([0.8, -0.3], dtype=np.float64)
    rng = np.random.default_rng(123)
    n = 100_000
    eps = rng.standard_normal((n, 2))
    zt = forward_noise(np.broadcast_to(z, (n, 2)), t, eps, sched)
    mean = zt.mean(axis=0)
    three_sigma = 3.0 * math.sqrt((1.0 - ab) / n)
    assert np.all(np.abs(mean - math.sqrt(ab) * z) <= three_sigma)
    var = zt.var(axis=0)
    assert np.all(np.abs(var - (1.0 - ab)) <= 0.02 * (1.0 - ab))


def test_forward_noise_validates_inputs():
    sched = make_noise_schedule(10)
    z = np.zeros((2, 2))
    with pytest.raises(ValueError):
        forward_noise(z, 0, z, sched)
    with pytest.raises(ValueError):
        forward_noise(z, 11, z, sched)
    with pytest.raises(ValueError):
        forward_noise(z, 3, np.zeros((2, 3)), sched)


def test_ddim_plan_even_spacing_ends_at_T():
    sched = make_noise_schedule(1000)
    plan = make_ddim_plan(sched, 10)
    assert plan.taus.tolist() == [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]
    assert plan.taus[-1] == 1000


def test_ddim_plan_strictly_increasing_various_counts():
    sched = make_noise_schedule(97)
    for s in (1, 2, 3, 7, 50, 96, 97):
        plan = make_ddim_plan(sched, s)
        assert plan.num_steps == s
        assert np.all(np.diff(plan.taus) > 0)
        assert plan.taus[-1] == 97
        assert np.all(plan.taus >= 1)


def test_ddim_plan_eta_zero_sigmas_exactly_zero():
    sched = make_noise_schedule(200)
    plan = make_ddim_plan(sched, 20, eta=0.0)
    assert np.all(plan.sigmas == 0.0)


def test_ddim_plan_eta_one_full_length_matches_posterior_scales():
    # Oracle: the ancestral posterior scale sqrt(beta_tilde_t) with
    # beta_tilde_t = (1 - ab_{t-1}) / (1 - ab_t) * beta_t.
    sched = make_noise_schedule(50, 1e-3, 0.05)
    plan = make_ddim_plan(sched, 50, eta=1.0)
    assert plan.taus.tolist() == list(range(1, 51))
    for i, t in enumerate(plan.taus):
        ab_t = sched.alpha_bar(int(t))
        ab_prev = sched.alpha_bar(int(t) - 1)
        beta_tilde = (1.0 - ab_prev) / (1.0 - ab_t) * sched.betas[t - 1]
        assert plan.sigmas[i] == pytest.approx(math.sqrt(beta_tilde), abs=1e-9)


def test_ddim_plan_rejects_bad_args():
    sched = make_noise_schedule(10)
    with pytest.raises(ValueError):
        make_ddim_plan(sched, 0)
    with pytest.raises(ValueError):
        make_ddim_plan(sched, 11)
    with pytest.raises(ValueError):
        make_ddim_plan(sched, 5, eta=-0.1)
    with pytest.raises(ValueError):
        make_ddim_plan(sched, 5, eta=1.5)


def test_ddim_step_scalar_hand_checked_value():
    # Hand arithmetic: ab_t = 0.25, ab_prev = 0.64, z_t = 1.0, z_hat = 0.8,
    # sigma = 0  =>  eps_hat = (1 - 0.5*0.8)/sqrt(0.75) = 0.6928203230275509
    #            =>  out = 0.8*0.8 + 0.6*eps_hat = 1.0556921938165305
    betas = np.array([1.0 - 0.64, 1.0 - 0.25 / 0.64], dtype=np.float64)
    sched = make_noise_schedule(2, betas[0], betas[1])
    # Construct the schedule directly so alpha_bars are exactly [0.64, 0.25].
    assert sched.alpha_bars[0] == pytest.approx(0.64, abs=1e-12)
    assert sched.alpha_bars[1] == pytest.approx(0.25, abs=1e-12)
    plan = make_ddim_plan(sched, 2, eta=0.0)
    out = ddim_step(np.array(1.0), np.array(0.8), 1, plan, sched)
    assert float(out) == pytest.approx(1.0556921938165305, abs=1e-9)


def test_ddim_step_final_step_returns_clean_estimate():
    sched = make_noise_schedule(100)
    plan = make_ddim_plan(sched, 5, eta=0.0)
    rng = np.random.default_rng(7)
    z = rng.standard_normal((4, 4, 2))
    z_hat = rng.standard_normal((4, 4, 2))
    out = ddim_step(z, z_hat, 0, plan, sched)
    assert np.array_equal(out, z_hat)


def test_ddim_step_requires_noise_when_stochastic():
    sched = make_noise_schedule(100)
    plan = make_ddim_plan(sched, 10, eta=1.0)
    z = np.zeros((2, 2))
    with pytest.raises(ValueError):
        ddim_step(z, z, 5, plan, sched, noise=None)


def test_ddim_step_matches_ancestral_sampling_at_eta_one():
    # Oracle: the ancestral update written the classic way,
    #   mu = sqrt(ab_prev) beta_t / (1-ab_t) * z_hat
    #      + sqrt(alpha_t) (1-ab_prev) / (1-ab_t) * z_t
    #   z_{t-1} = mu + sqrt(beta_tilde_t) * noise
    sched = make_noise_schedule(40, 1e-3, 0.08)
    plan = make_ddim_plan(sched, 40, eta=1.0)
    rng = np.random.default_rng(11)
    z = rng.standard_normal((3, 3))
    z_hat = 0.5 * rng.standard_normal((3, 3))
    for index in range(1, 40):
        t = int(plan.taus[index])
        noise = rng.standard_normal((3, 3))
        got = ddim_step(z, z_hat, index, plan, sched, noise=noise)
        ab_t = sched.alpha_bar(t)
        ab_prev = sched.alpha_bar(t - 1)
        beta_t = sched.betas[t - 1]
        alpha_t = 1.0 - beta_t
        mu = (
            math.sqrt(ab_prev) * beta_t / (1.0 - ab_t) * z_hat
            + math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t) * z
        )
        beta_tilde = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
        want = mu + math.sqrt(beta_tilde) * noise
        assert np.max(np.abs(got - want)) <= 1e-9


def test_sample_deterministic_for_equal_seeds():
    sched = make_noise_schedule(100)
    plan = make_ddim_plan(sched, 10, eta=0.0)
    z_cond = np.linspace(-1, 1, 16).reshape(4, 4)

    def predictor(z_t, z_cond, t):
        return 0.9 * z_cond + 0.01 * z_t

    a = sample(predictor, z_cond, plan, sched, seed=42)
    b = sample(predictor, z_cond, plan, sched, seed=42)
    assert np.array_equal(a, b)
    c = sample(predictor, z_cond, plan, sched, seed=43)
    assert not np.array_equal(a, c)


def test_sample_with_oracle_predictor_recovers_clean_latent():
    sched = make_noise_schedule(100)
    rng = np.random.default_rng(3)
    z0 = rng.standard_normal((2, 3))
    z_cond = np.zeros((2, 3))

    def oracle(z_t, z_cond, t):
        return z0

    for s in (1, 4, 100):
        plan = make_ddim_plan(sched, s, eta=0.0)
        out = sample(oracle, z_cond, plan, sched, seed=0)
        assert np.max(np.abs(out - z0)) <= 1e-12


def test_sample_single_step_collapses_to_prediction():
    sched = make_noise_schedule(100)
    plan = make_ddim_plan(sched, 1, eta=0.0)
    assert plan.taus.tolist() == [100]
    seen = {}

    def predictor(z_t, z_cond, t):
        seen["t"] = t
        return np.full_like(z_t, 0.25)

    out = sample(predictor, np.zeros((5, 5)), plan, sched, seed=9)
    assert seen["t"] == 100
    assert np.all(out == 0.25)


@settings(max_examples=50, deadline=None)
@given(
    T=st.integers(min_value=1, max_value=300),
    data=st.data(),
)
def test_ddim_plan_invariants_property(T, data):
    s = data.draw(st.integers(min_value=1, max_value=T))
    sched = make_noise_schedule(T, 1e-4, 0.02)
    plan = make_ddim_plan(sched, s, eta=data.draw(st.floats(0.0, 1.0)))
    assert plan.taus[-1] == T
    assert np.all(plan.taus >= 1)
    assert np.all(np.diff(plan.taus) > 0)
    assert np.all(plan.sigmas >= 0.0)
    assert plan.sigmas[0] == 0.0  # ab_prev = 1 before the first kept step


@settings(max_examples=30, deadline=None)
@given(
    t_frac=st.floats(0.01, 1.0),
    scale=st.floats(-2.0, 2.0),
)
def test_forward_noise_is_affine_in_inputs_property(t_frac, scale):
    sched = make_noise_schedule(200)
    t = max(1, int(round(t_frac * 200)))
    z = np.full((3, 3), scale)
    eps = np.full((3, 3), -scale)
    out = forward_noise(z, t, eps, sched)
    ab = sched.alpha_bar(t)
    want = (math.sqrt(ab) - math.sqrt(1 - ab)) * scale
    assert np.allclose(out, want, atol=1e-12)
