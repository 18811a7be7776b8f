"""Denoiser shape, conditioning-expansion, and parameterization tests."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from deshadow.denoiser import (
    DenoiserConfig,
    LatentDenoiser,
    build_conditioned_denoiser,
    expand_conditioning_channels,
    predict_clean,
    timestep_embedding,
)
from deshadow.schedule import make_noise_schedule

CFG = DenoiserConfig(latent_channels=4, widths=(16, 24), time_embed_dim=32)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(parameterization="v_pred")
    with pytest.raises(ValueError):
        DenoiserConfig(widths=(16,))
    with pytest.raises(ValueError):
        DenoiserConfig(time_embed_dim=33)
    assert CFG.in_channels == 8


def test_config_dict_round_trip():
    cfg = DenoiserConfig(latent_channels=2, widths=(8, 16, 16), parameterization="eps_pred")
    assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shapes_and_determinism():
    torch.manual_seed(0)
    net = build_conditioned_denoiser(CFG)
    z_t = torch.randn(2, 4, 8, 8)
    z_x = torch.randn(2, 4, 8, 8)
    with torch.no_grad():
        out1 = net(z_t, z_x, 5)
        out2 = net(z_t, z_x, torch.tensor([5, 5]))
    assert out1.shape == (2, 4, 8, 8)
    assert torch.equal(out1, out2)


def test_forward_validates_inputs():
    torch.manual_seed(0)
    net = build_conditioned_denoiser(CFG)
    z = torch.randn(1, 4, 8, 8)
    with pytest.raises(ValueError):
        net(z, torch.randn(1, 4, 4, 4), 1)
    with pytest.raises(ValueError):
        net(z, None, 1)


def test_forward_rejects_latents_the_stage_stack_cannot_halve():
    torch.manual_seed(0)
    cfg = DenoiserConfig(latent_channels=4, widths=(8, 12, 12), time_embed_dim=32)
    net = build_conditioned_denoiser(cfg)  # 3 widths -> two exact halvings
    z = torch.randn(1, 4, 6, 6)
    with pytest.raises(ValueError, match="divisible by 4"):
        net(z, torch.randn(1, 4, 6, 6), 1)
    with torch.no_grad():  # 12 halves exactly twice: 12 -> 6 -> 3
        out = net(torch.randn(1, 4, 12, 12), torch.randn(1, 4, 12, 12), 1)
    assert out.shape == (1, 4, 12, 12)


def test_timestep_embedding_distinguishes_steps():
    emb = timestep_embedding(torch.tensor([1, 2, 500]), 32)
    assert emb.shape == (3, 32)
    assert not torch.allclose(emb[0], emb[1])
    # Bounded components.
    assert float(emb.abs().max()) <= 1.0 + 1e-12


def test_expand_conditioning_weight_rule():
    w = torch.randn(6, 4, 3, 3)
    ex = expand_conditioning_channels(w)
    assert ex.shape == (6, 8, 3, 3)
    assert torch.equal(ex[:, :4], w * 0.5)
    assert torch.equal(ex[:, 4:], w * 0.5)
    with pytest.raises(ValueError):
        expand_conditioning_channels(torch.randn(3, 3))


def test_expanded_stem_duplicate_input_matches_unconditional():
    torch.manual_seed(1)
    base = LatentDenoiser(CFG, in_channels=CFG.latent_channels)
    state = base.state_dict()
    state["stem.weight"] = expand_conditioning_channels(state["stem.weight"])
    cond = LatentDenoiser(CFG)
    cond.load_state_dict(state)

    z = torch.randn(1, 4, 8, 8)
    with torch.no_grad():
        want = base(z, None, 3)
        got = cond(z, z, 3)
    assert float((want - got).abs().max()) <= 1e-6


def test_expanded_stem_zero_conditioning_halves_pre_bias_response():
    torch.manual_seed(2)
    base = LatentDenoiser(CFG, in_channels=CFG.latent_channels)
    with torch.no_grad():
        base.stem.bias.zero_()
    expanded = expand_conditioning_channels(base.stem.weight.data)
    stem2 = torch.nn.Conv2d(8, CFG.widths[0], 3, padding=1, bias=False)
    with torch.no_grad():
        stem2.weight.copy_(expanded)
        z = torch.randn(1, 4, 8, 8)
        full = torch.nn.functional.conv2d(z, base.stem.weight, padding=1)
        half = stem2(torch.cat([z, torch.zeros_like(z)], dim=1))
    assert float((half - 0.5 * full).abs().max()) <= 1e-6


def test_build_conditioned_matches_manual_expansion():
    torch.manual_seed(3)
    net = build_conditioned_denoiser(CFG)
    assert net.in_channels == 8
    assert net.stem.weight.shape[1] == 8
    # The two halves of the stem are identical by construction.
    assert torch.equal(net.stem.weight[:, :4], net.stem.weight[:, 4:])


def test_predict_clean_z0_returns_raw_output():
    torch.manual_seed(4)
    net = build_conditioned_denoiser(CFG)
    sched = make_noise_schedule(100)
    rng = np.random.default_rng(0)
    z_t = rng.standard_normal((8, 8, 4)).astype(np.float32)
    z_x = rng.standard_normal((8, 8, 4)).astype(np.float32)
    out = predict_clean(net, z_t, z_x, 10, sched)
    assert out.shape == (8, 8, 4)
    with torch.no_grad():
        raw = net(
            torch.from_numpy(z_t.transpose(2, 0, 1))[None],
            torch.from_numpy(z_x.transpose(2, 0, 1))[None],
            10,
        )
    assert np.allclose(out, raw[0].numpy().transpose(1, 2, 0), atol=0)


def test_predict_clean_eps_applies_conversion():
    cfg = DenoiserConfig(
        latent_channels=4, widths=(16, 24), time_embed_dim=32, parameterization="eps_pred"
    )
    torch.manual_seed(5)
    net = build_conditioned_denoiser(cfg)
    sched = make_noise_schedule(100)
    rng = np.random.default_rng(1)
    z_t = rng.standard_normal((8, 8, 4)).astype(np.float32)
    z_x = rng.standard_normal((8, 8, 4)).astype(np.float32)
    t = 60
    got = predict_clean(net, z_t, z_x, t, sched)
    with torch.no_grad():
        eps_hat = net(
            torch.from_numpy(z_t.transpose(2, 0, 1))[None],
            torch.from_numpy(z_x.transpose(2, 0, 1))[None],
            t,
        )[0].numpy().transpose(1, 2, 0)
    ab = sched.alpha_bar(t)
    want = (z_t - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
    assert np.max(np.abs(got - want)) <= 1e-6


def test_predict_clean_eps_oracle_noise_recovers_clean_exactly():
    # If the network output were the true noise, the conversion must invert
    # forward noising up to float precision.
    from deshadow.schedule import forward_noise

    sched = make_noise_schedule(50)
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((6, 6, 4))
    eps = rng.standard_normal((6, 6, 4))
    t = 30
    z_t = forward_noise(z0, t, eps, sched)
    ab = sched.alpha_bar(t)
    back = (z_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    assert np.max(np.abs(back - z0)) <= 1e-12
