import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from soda.diffusion import (
    GuidanceConfig,
    draw_masks,
    forward_sample,
    guided_epsilon,
    reverse_step,
    sample,
    training_loss,
)
from soda.network import ModelConfig, build_model
from soda.schedules import build_schedule, schedule_from_table, stride


def tiny_model(**kw):
    cfg = dict(
        latent_dim=12, source_size=16, target_size=8, enc_stem_channels=8, enc_channels=(8, 8),
        base_channels=8, channel_mult=(1, 2), groups=4, dropout=0.0,
    )
    cfg.update(kw)
    torch.manual_seed(0)
    model = build_model(ModelConfig(**cfg))
    with torch.no_grad():
        # zero-initialised output layers would hide any dependence on z
        for prm in model.parameters():
            prm.add_(0.05 * torch.randn_like(prm))
    return model


def tiny_batch(B=3, seed=0, src_size=16, tgt_size=8):
    g = torch.Generator().manual_seed(seed)
    return {
        "source": torch.randn(B, 3, src_size, src_size, generator=g),
        "target": torch.rand(B, 3, tgt_size, tgt_size, generator=g) * 2 - 1,
        "source_pose": None,
        "target_pose": None,
    }


class OracleStub(torch.nn.Module):
    """Denoiser that inverts the closed form given the clean target."""

    num_sections = 3

    def __init__(self, x0, schedule, mode="oracle"):
        super().__init__()
        self.x0, self.schedule, self.mode = x0, schedule, mode
        self.cfg = type("C", (), {"pose": False, "bottleneck_dropout": 0.0, "target_size": x0.shape[-1]})()

    def encoder(self, x, pose=None):
        return x.flatten(1)[:, :4]

    def denoiser(self, x_t, t, z, pose=None, keep=None):
        if self.mode == "zeros":
            return torch.zeros_like(x_t)
        ab = torch.as_tensor(self.schedule.alpha_bars, dtype=x_t.dtype)[t - 1].reshape(-1, 1, 1, 1)
        return (x_t - ab.sqrt() * self.x0) / (1 - ab).sqrt()


class LinearStub(torch.nn.Module):
    """eps(x_t | z) = A z broadcast over pixels, plus c * x_t."""

    num_sections = 2

    def __init__(self, D=4, c=0.0, size=4):
        super().__init__()
        g = torch.Generator().manual_seed(5)
        self.A = torch.randn(3, D, generator=g, dtype=torch.float64)
        self.c = c
        self.cfg = type("C", (), {"target_size": size, "pose": False})()

    def denoise(self, x_t, t, z, pose=None, keep=None):
        zz = z if keep is None else z * keep
        return (zz @ self.A.T)[:, :, None, None] + self.c * x_t


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(latent_mask_rate=1.5)
    with pytest.raises(ValueError):
        GuidanceConfig(strength=-1)
    with pytest.raises(ValueError):
        GuidanceConfig(masking_mode="everything")


def test_forward_limits():
    x0 = torch.randn(2, 3, 4, 4)
    eps = torch.randn(2, 3, 4, 4)
    s = schedule_from_table("linear", [1.0, 0.0])
    assert torch.equal(forward_sample(x0, 1, eps, s), x0)
    assert torch.equal(forward_sample(x0, 2, eps, s), eps)


def test_forward_rejects_bad_t():
    s = build_schedule("cosine", 10)
    x = torch.zeros(1, 3, 2, 2)
    with pytest.raises(ValueError):
        forward_sample(x, 0, x, s)
    with pytest.raises(ValueError):
        forward_sample(x, 11, x, s)


def test_forward_matches_iterated_chain_analytically():
    s = build_schedule("cosine", 50)
    mean_coef, var = 1.0, 0.0
    for t in range(1, 51):
        a = s.alphas[t - 1]
        mean_coef *= math.sqrt(a)
        var = a * var + (1 - a)
        assert abs(mean_coef - math.sqrt(s.alpha_bars[t - 1])) <= 1e-12
        assert abs(var - (1 - s.alpha_bars[t - 1])) <= 1e-12


def test_forward_matches_iterated_chain_monte_carlo():
    s = build_schedule("linear", 50, beta_min=1e-3, beta_max=0.05)
    n, x0 = 10**5, 5.0
    g = torch.Generator().manual_seed(0)
    x = torch.full((n,), x0, dtype=torch.float64)
    for t in range(1, 51):
        a = s.alphas[t - 1]
        x = math.sqrt(a) * x + math.sqrt(1 - a) * torch.randn(n, generator=g, dtype=torch.float64)
    closed = forward_sample(
        torch.full((n, 1), x0, dtype=torch.float64), 50, torch.randn(n, 1, generator=g, dtype=torch.float64), s
    )
    ab = s.alpha_bars[-1]
    for samples in (x, closed.view(-1)):
        assert float(samples.mean()) == pytest.approx(math.sqrt(ab) * x0, rel=0.01)
        assert float(samples.var()) == pytest.approx(1 - ab, rel=0.01)


def test_oracle_model_has_zero_loss():
    s = build_schedule("cosine", 100)
    batch = tiny_batch()
    stub = OracleStub(batch["target"], s)
    loss = training_loss(batch, stub, s, GuidanceConfig(), torch.Generator().manual_seed(0))
    assert float(loss) < 1e-10


def test_zero_model_loss_is_noise_variance():
    s = build_schedule("cosine", 100)
    batch = tiny_batch(B=64)
    batch["target"] = torch.zeros(64, 3, 32, 32)
    stub = OracleStub(batch["target"], s, mode="zeros")
    loss = training_loss(batch, stub, s, GuidanceConfig(), torch.Generator().manual_seed(0))
    n = batch["target"].numel()
    assert abs(float(loss) - 1.0) < 5 * math.sqrt(2 / n)


def test_empty_batch_raises():
    s = build_schedule("cosine", 10)
    batch = tiny_batch(B=0)
    with pytest.raises(ValueError):
        training_loss(batch, OracleStub(batch["target"], s), s, GuidanceConfig(), torch.Generator())


def test_full_latent_masking_makes_loss_source_invariant():
    model = tiny_model()
    s = build_schedule("inverted", 100)
    cfg = GuidanceConfig(latent_mask_rate=1.0)
    a, b = tiny_batch(seed=0), tiny_batch(seed=0)
    b["source"] = torch.randn_like(b["source"]) * 3
    torch.manual_seed(1)
    la = training_loss(a, model, s, cfg, torch.Generator().manual_seed(7))
    torch.manual_seed(1)
    lb = training_loss(b, model, s, cfg, torch.Generator().manual_seed(7))
    assert torch.equal(la, lb)
    cfg0 = GuidanceConfig(latent_mask_rate=0.0, layer_mask_rate=0.0)
    torch.manual_seed(1)
    lc = training_loss(a, model, s, cfg0, torch.Generator().manual_seed(7))
    torch.manual_seed(1)
    ld = training_loss(b, model, s, cfg0, torch.Generator().manual_seed(7))
    assert not torch.equal(lc, ld)


def test_masks_draw_count_independent_of_rates():
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    draw_masks(5, 4, GuidanceConfig(latent_mask_rate=0.0, layer_mask_rate=0.0), g1)
    draw_masks(5, 4, GuidanceConfig(latent_mask_rate=1.0, layer_mask_rate=0.5, masking_mode="latent+pose"), g2)
    assert torch.equal(torch.rand(3, generator=g1), torch.rand(3, generator=g2))


def test_mask_modes():
    g = torch.Generator().manual_seed(0)
    m = draw_masks(1000, 5, GuidanceConfig(latent_mask_rate=1.0, pose_mask_rate=1.0, masking_mode="pose"), g)
    assert m["sections"].mean() > 0.7 and m["pose"].sum() == 0
    m = draw_masks(1000, 5, GuidanceConfig(latent_mask_rate=1.0, pose_mask_rate=1.0, masking_mode="latent"), g)
    assert m["sections"].sum() == 0 and m["pose"].sum() == 1000
    m = draw_masks(20000, 5, GuidanceConfig(latent_mask_rate=0.12, layer_mask_rate=0.15), g)
    assert float(m["sections"].mean()) == pytest.approx(0.88 * 0.85, abs=0.01)


def test_guidance_identities_on_real_model():
    model = tiny_model().eval()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 8, 8, generator=g)
    t = torch.tensor([5, 50])
    z = torch.randn(2, 12, generator=g)
    with torch.no_grad():
        cond = model.denoise(x, t, z)
        uncond = model.denoise(x, t, torch.zeros_like(z))
        assert torch.equal(guided_epsilon(model, x, t, z, g=1.0), cond)
        assert torch.equal(guided_epsilon(model, x, t, z, g=0.0), uncond)
        mixed = guided_epsilon(model, x, t, z, g=2.5)
    assert torch.allclose(mixed, uncond + 2.5 * (cond - uncond), atol=1e-6)


@given(st.floats(0, 5))
def test_guidance_on_linear_stub(gval):
    stub = LinearStub()
    z = torch.randn(3, 4, dtype=torch.float64)
    x = torch.zeros(3, 3, 4, 4, dtype=torch.float64)
    out = guided_epsilon(stub, x, torch.ones(3, dtype=torch.long), z, g=gval)
    expect = gval * (z @ stub.A.T)[:, :, None, None].expand_as(x)
    assert torch.allclose(out, expect, atol=1e-12)


def test_guidance_rejects_negative_strength():
    with pytest.raises(ValueError):
        guided_epsilon(LinearStub(), torch.zeros(1, 3, 4, 4), torch.ones(1), torch.zeros(1, 4), g=-0.5)


def test_reverse_step_inverts_single_step_chain():
    s = build_schedule("linear", 1, beta_min=0.3, beta_max=0.3)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    xt = forward_sample(x0, 1, eps, s)
    assert torch.allclose(reverse_step(xt, 1, eps, s), x0, atol=1e-6)


def test_reverse_step_identity_when_alpha_is_one():
    s = schedule_from_table("linear", [0.5, 0.5, 0.25])  # alpha_2 == 1
    x = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    eps = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    out = reverse_step(x, 2, eps, s, gen=torch.Generator().manual_seed(0))
    assert torch.equal(out, x)


@pytest.mark.parametrize("rule", ["fixed_beta", "fixed_beta_tilde"])
def test_reverse_step_noise_variance(rule):
    s = build_schedule("cosine", 20)
    t = 10
    n = 200000
    x = torch.zeros(n, 1, 1, 1, dtype=torch.float64)
    out = reverse_step(x, t, torch.zeros_like(x), s, rule, torch.Generator().manual_seed(0))
    a = s.alpha(t)
    expect = 1 - a if rule == "fixed_beta" else (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)) * (1 - a)
    assert float(out.var()) == pytest.approx(expect, rel=0.02)
    with pytest.raises(ValueError):
        reverse_step(x, t, x, s, "learned", torch.Generator())


@given(kind=st.sampled_from(["linear", "cosine", "inverted"]), t=st.integers(2, 100), back=st.integers(1, 50))
def test_clipped_step_equals_eps_form_inside_range(kind, t, back):
    # x_t built from an in-range x0 and its own noise: nothing gets clamped,
    # so the posterior form must agree with the eps form
    s = build_schedule(kind, 100)
    g = torch.Generator().manual_seed(t)
    x0 = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64) * 1.8 - 0.9
    eps = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    xt = forward_sample(x0, t, eps, s)
    tp = max(0, t - back)
    a = reverse_step(xt, t, eps, s, gen=torch.Generator().manual_seed(1), t_prev=tp)
    b = reverse_step(xt, t, eps, s, gen=torch.Generator().manual_seed(1), t_prev=tp, clip_x0=True)
    assert torch.allclose(a, b, atol=1e-8)


def test_clipped_final_step_stays_in_range():
    s = build_schedule("inverted", 100)
    x = torch.full((1, 3, 4, 4), 5.0, dtype=torch.float64)
    out = reverse_step(x, 60, torch.zeros_like(x), s, t_prev=0, clip_x0=True)
    assert torch.equal(out, torch.ones_like(x))
    assert float(reverse_step(x, 60, torch.zeros_like(x), s, t_prev=0).min()) > 1


def test_reverse_step_is_deterministic():
    s = build_schedule("cosine", 20)
    x = torch.randn(2, 3, 4, 4)
    a = reverse_step(x, 5, x, s, gen=torch.Generator().manual_seed(1))
    b = reverse_step(x, 5, x, s, gen=torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


def test_one_stride_sampler_matches_analytic_denoise():
    s = build_schedule("linear", 10)
    stub = LinearStub(c=0.4)
    z = torch.zeros(2, 4, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    xT = torch.randn((2, 3, 4, 4), generator=torch.Generator().manual_seed(0))
    out = sample(stub, z, None, s, 1, GuidanceConfig(strength=1.0), gen)
    ab = s.alpha_bars[-1]
    expect = ((xT.double() - math.sqrt(1 - ab) * 0.4 * xT.double()) / math.sqrt(ab)).clamp(-1, 1)
    assert torch.allclose(out.double(), expect, atol=1e-5)


def test_sampler_g1_skips_unconditional_branch():
    model = tiny_model()
    s = build_schedule("cosine", 20)
    z = torch.randn(2, 12, generator=torch.Generator().manual_seed(4))
    out = sample(model, z, None, s, 5, GuidanceConfig(strength=1.0), torch.Generator().manual_seed(0))

    gen = torch.Generator().manual_seed(0)
    x = torch.randn((2, 3, 8, 8), generator=gen)
    model.eval()
    with torch.no_grad():
        for t, tp in stride(s, 5).pairs():
            eps = model.denoise(x, torch.full((2,), t), z)
            x = reverse_step(x, t, eps, s, "fixed_beta", gen, tp)
    assert torch.equal(out, x.clamp(-1, 1))


def test_sampler_determinism_and_range():
    model = tiny_model()
    s = build_schedule("inverted", 20)
    z = torch.randn(2, 12)
    a = sample(model, z, None, s, 20, GuidanceConfig(), torch.Generator().manual_seed(9))
    b = sample(model, z, None, s, 20, GuidanceConfig(), torch.Generator().manual_seed(9))
    assert torch.equal(a, b)
    assert a.min() >= -1 and a.max() <= 1 and a.shape == (2, 3, 8, 8)
    assert model.training  # restored


def test_sampler_accepts_view_sets():
    model = tiny_model()
    s = build_schedule("cosine", 10)
    views = torch.randn(2, 3, 3, 16, 16)
    out = sample(model, views, None, s, 2, GuidanceConfig(), torch.Generator().manual_seed(0))
    assert out.shape == (2, 3, 8, 8)
