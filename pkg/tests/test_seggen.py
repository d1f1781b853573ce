import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from sbgan import data, seggen
from sbgan.seggen import (GumbelConfig, ProgressiveSchedule, SegCritic,
                          SegGenerator, SegTrainConfig, generate_segmap,
                          gumbel_from_uniform, gumbel_softmax, sample_gumbel,
                          straight_through_discretize, train_seg,
                          wgan_gp_losses)

EULER_GAMMA = 0.5772156649


def small_models(num_classes=4, stages=((4, 4), (8, 8)), seed=0):
    torch.manual_seed(seed)
    gen = SegGenerator(num_classes, stages, latent_dim=16,
                       base_channels=16, min_channels=8)
    critic = SegCritic(num_classes, stages, base_channels=16, min_channels=8)
    return gen, critic


# ---------------------------------------------------------------- noise

def test_gumbel_transform_hand_value():
    # u = 1/e gives -log(-log(1/e)) = -log(1) = 0
    g = gumbel_from_uniform(torch.tensor(1.0 / math.e, dtype=torch.float64))
    assert abs(g.item()) < 1e-9


def test_gumbel_mean_matches_euler_gamma():
    g = sample_gumbel((1_000_000,), seed=7)
    assert abs(g.mean().item() - EULER_GAMMA) < 0.01


def test_gumbel_sampling_deterministic():
    a = sample_gumbel((3, 4), seed=11)
    b = sample_gumbel((3, 4), seed=11)
    c = sample_gumbel((3, 4), seed=12)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_gumbel_finite_at_uniform_extremes():
    g = gumbel_from_uniform(torch.tensor([0.0, 1.0 - 1e-7]))
    assert torch.isfinite(g).all()


# ---------------------------------------------------------- gumbel softmax

def test_gumbel_softmax_zero_noise_identity():
    cfg = GumbelConfig(tau=1.0)
    p = torch.tensor([0.2, 0.5, 0.3]).view(1, 3, 1, 1)
    s = gumbel_softmax(p, torch.zeros_like(p), cfg)
    assert torch.allclose(s, p, atol=1e-6)


def test_gumbel_softmax_hand_case():
    # K=2, p=(1/2, 1/2), g=(ln 3, 0), tau=1:
    # softmax(log .5 + ln 3, log .5) = (1.5, .5)/2 = (0.75, 0.25)
    cfg = GumbelConfig(tau=1.0)
    p = torch.tensor([0.5, 0.5]).view(1, 2, 1, 1)
    g = torch.tensor([math.log(3.0), 0.0]).view(1, 2, 1, 1)
    s = gumbel_softmax(p, g, cfg)
    expected = torch.tensor([0.75, 0.25]).view(1, 2, 1, 1)
    assert torch.allclose(s, expected, atol=1e-6)


def test_gumbel_softmax_low_temperature_approaches_argmax():
    cfg = GumbelConfig(tau=0.01)
    rng = torch.Generator().manual_seed(3)
    raw = torch.randn(2, 4, 3, 3, generator=rng)
    p = F.softmax(raw, dim=1)
    g = sample_gumbel(p.shape, seed=5)
    s = gumbel_softmax(p, g, cfg)
    winner = (torch.log(p + 1e-20) + g).argmax(dim=1)
    assert torch.equal(s.argmax(dim=1), winner)
    assert s.max(dim=1).values.min() > 0.99


def test_gumbel_softmax_output_on_simplex():
    cfg = GumbelConfig()
    rng = torch.Generator().manual_seed(9)
    p = F.softmax(torch.randn(4, 6, 5, 5, generator=rng), dim=1)
    s = gumbel_softmax(p, sample_gumbel(p.shape, seed=2), cfg)
    assert (s.sum(dim=1) - 1.0).abs().max() < 1e-5
    assert s.min() >= 0


def test_gumbel_softmax_rejects_non_simplex():
    cfg = GumbelConfig()
    bad_sum = torch.full((1, 2, 1, 1), 0.6)
    with pytest.raises(ValueError):
        gumbel_softmax(bad_sum, torch.zeros_like(bad_sum), cfg)
    negative = torch.tensor([1.5, -0.5]).view(1, 2, 1, 1)
    with pytest.raises(ValueError):
        gumbel_softmax(negative, torch.zeros_like(negative), cfg)


def test_gumbel_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError):
        GumbelConfig(tau=0.0)
    with pytest.raises(ValueError):
        GumbelConfig(tau=-1.0)


def test_gumbel_softmax_gradient_matches_finite_differences():
    cfg = GumbelConfig(tau=0.7)
    rng = torch.Generator().manual_seed(17)
    raw = torch.randn(1, 3, 2, 2, generator=rng, dtype=torch.float64,
                      requires_grad=True)
    g = sample_gumbel(raw.shape, seed=21).double()
    w = torch.randn(raw.shape, generator=rng, dtype=torch.float64)

    def f(x):
        return (gumbel_softmax(F.softmax(x, dim=1), g, cfg) * w).sum()

    f(raw).backward()
    h = 1e-6
    flat = raw.detach().flatten()
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        fd = (f(up.view_as(raw)) - f(dn.view_as(raw))).item() / (2 * h)
        an = raw.grad.flatten()[i].item()
        assert abs(fd - an) <= 1e-3 * max(1.0, abs(fd))


# ----------------------------------------------------- straight-through

def test_discretize_forward_is_one_hot():
    s = torch.tensor([0.2, 0.5, 0.3]).view(1, 3, 1, 1)
    hard = straight_through_discretize(s)
    assert torch.equal(hard.view(-1), torch.tensor([0.0, 1.0, 0.0]))


def test_discretize_tie_goes_to_smallest_index():
    s = torch.tensor([0.4, 0.4, 0.2]).view(1, 3, 1, 1)
    hard = straight_through_discretize(s)
    assert torch.equal(hard.view(-1), torch.tensor([1.0, 0.0, 0.0]))


def test_discretize_partition_of_unity():
    rng = torch.Generator().manual_seed(4)
    s = F.softmax(torch.randn(3, 5, 4, 4, generator=rng), dim=1)
    hard = straight_through_discretize(s)
    assert torch.equal(hard.sum(dim=1), torch.ones(3, 4, 4))
    assert set(hard.unique().tolist()) <= {0.0, 1.0}


def test_discretize_backward_is_identity():
    rng = torch.Generator().manual_seed(6)
    s = F.softmax(torch.randn(2, 3, 2, 2, generator=rng), dim=1)
    s.requires_grad_(True)
    w = torch.randn(s.shape, generator=rng)
    (straight_through_discretize(s) * w).sum().backward()
    assert torch.allclose(s.grad, w)


def test_discretize_zero_backward_detaches():
    s = F.softmax(torch.randn(1, 3, 2, 2), dim=1).requires_grad_(True)
    out = straight_through_discretize(s, backward="zero")
    assert not out.requires_grad


def test_discretize_rejects_unknown_mode():
    s = torch.ones(1, 2, 1, 1) * 0.5
    with pytest.raises(ValueError):
        straight_through_discretize(s, backward="ghost")


def test_discretized_samples_follow_probabilities():
    # Discretized Gumbel-softmax samples are categorical draws from p.
    cfg = GumbelConfig(tau=1.0)
    probs = torch.tensor([0.5, 0.3, 0.2])
    n = 20_000
    p = probs.view(1, 3, 1, 1).expand(n, 3, 1, 1)
    g = sample_gumbel(p.shape, seed=33)
    hard = straight_through_discretize(gumbel_softmax(p, g, cfg))
    freq = hard.sum(dim=(0, 2, 3)) / n
    assert (freq - probs).abs().max() < 0.02


# ------------------------------------------------------------ schedule

def test_schedule_from_final_resolution():
    sched = ProgressiveSchedule.from_final((32, 64), steps_per_stage=100)
    assert sched.stage_resolutions == ((4, 8), (8, 16), (16, 32), (32, 64))
    assert sched.total_steps == 400


def test_schedule_stage_and_alpha_boundaries():
    sched = ProgressiveSchedule(((4, 4), (8, 8), (16, 16)),
                                steps_per_stage=100, fadein_fraction=0.3)
    assert sched.stage_at(0) == (0, 1.0)
    assert sched.stage_at(99) == (0, 1.0)
    assert sched.stage_at(100) == (1, 0.0)
    assert sched.stage_at(115) == (1, 0.5)
    assert sched.stage_at(130) == (1, 1.0)
    assert sched.stage_at(250) == (2, 1.0)
    assert sched.stage_at(10_000) == (2, 1.0)


def test_schedule_rejects_non_doubling_resolutions():
    with pytest.raises(ValueError):
        ProgressiveSchedule(((4, 4), (9, 8)), steps_per_stage=10)


# ------------------------------------------------------------- models

def test_generator_output_shapes_per_stage():
    gen, _ = small_models()
    z = torch.randn(3, 16)
    gen.set_stage(0)
    assert gen(z).shape == (3, 4, 4, 4)
    gen.set_stage(1)
    assert gen(z).shape == (3, 4, 8, 8)


def test_generator_fadein_continuity():
    gen, _ = small_models(seed=2)
    z = torch.randn(2, 16, generator=torch.Generator().manual_seed(1))
    gen.set_stage(0)
    coarse = gen(z)
    gen.set_stage(1, alpha=0.0)
    blended = gen(z)
    up = F.interpolate(coarse, scale_factor=2, mode="nearest")
    assert torch.allclose(blended, up, atol=1e-6)


def test_critic_fadein_continuity():
    _, critic = small_models(seed=5)
    x = F.softmax(torch.randn(2, 4, 8, 8,
                              generator=torch.Generator().manual_seed(8)), dim=1)
    critic.set_stage(1, alpha=0.0)
    fine = critic(x)
    critic.set_stage(0)
    coarse = critic(F.avg_pool2d(x, 2))
    assert torch.allclose(fine, coarse, atol=1e-5)


def test_stage_state_errors():
    gen, critic = small_models()
    with pytest.raises(RuntimeError):
        gen.set_stage(5)
    with pytest.raises(RuntimeError):
        gen.set_stage(0, alpha=1.5)
    with pytest.raises(RuntimeError):
        critic.set_stage(-1)


def test_model_argument_errors():
    gen, critic = small_models()
    with pytest.raises(ValueError):
        gen(torch.randn(2, 7))
    critic.set_stage(1)
    with pytest.raises(ValueError):
        critic(torch.randn(2, 4, 4, 4))


def test_generate_segmap_shapes_and_determinism():
    gen, _ = small_models()
    gen.set_stage(1)
    z = torch.randn(5, 16, generator=torch.Generator().manual_seed(0))
    labels, soft, probs = generate_segmap(gen, z, GumbelConfig(), seed=42)
    assert labels.shape == (5, 8, 8) and labels.dtype == torch.int64
    assert soft.shape == (5, 4, 8, 8) and probs.shape == (5, 4, 8, 8)
    assert labels.min() >= 0 and labels.max() < 4
    assert (probs.sum(dim=1) - 1.0).abs().max() < 1e-5
    labels2, soft2, _ = generate_segmap(gen, z, GumbelConfig(), seed=42)
    assert torch.equal(labels, labels2)
    assert torch.equal(soft, soft2)


# -------------------------------------------------------------- wgan-gp

class ConstantCritic(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = nn.Parameter(torch.tensor(value))

    def forward(self, x):
        return self.value.expand(x.shape[0])


class UnitGradientCritic(nn.Module):
    """Linear critic whose input gradient has exact norm 1 everywhere."""

    def __init__(self, feature_shape):
        super().__init__()
        numel = int(np.prod(feature_shape))
        self.v = nn.Parameter(torch.full((numel,), 1.0 / math.sqrt(numel)))

    def forward(self, x):
        return x.flatten(1) @ self.v


def test_wgan_gp_constant_critic_hand_case():
    critic = ConstantCritic(3.7)
    real = torch.rand(4, 2, 4, 4, generator=torch.Generator().manual_seed(0))
    fake = torch.rand(4, 2, 4, 4, generator=torch.Generator().manual_seed(1))
    c_loss, g_loss, gp = wgan_gp_losses(critic, real, fake, gp_weight=10.0)
    # scores cancel, gradient is zero everywhere so the penalty is (0-1)^2
    assert abs(gp.item() - 1.0) < 1e-6
    assert abs(c_loss.item() - 10.0) < 1e-5
    assert abs(g_loss.item() + 3.7) < 1e-6


def test_wgan_gp_unit_gradient_critic_has_zero_penalty():
    critic = UnitGradientCritic((2, 4, 4))
    gen_rng = torch.Generator().manual_seed(2)
    real = torch.rand(6, 2, 4, 4, generator=gen_rng)
    fake = torch.rand(6, 2, 4, 4, generator=gen_rng)
    c_loss, _, gp = wgan_gp_losses(critic, real, fake, gp_weight=10.0)
    assert gp.item() < 1e-10
    expected = (critic(fake).mean() - critic(real).mean()).item()
    assert abs(c_loss.item() - expected) < 1e-6


def test_wgan_gp_identical_inputs():
    critic = UnitGradientCritic((3, 4, 4))
    x = torch.rand(5, 3, 4, 4, generator=torch.Generator().manual_seed(3))
    c_loss, g_loss, gp = wgan_gp_losses(critic, x, x.clone(), gp_weight=10.0)
    assert abs(c_loss.item()) < 1e-6
    assert abs(g_loss.item() + critic(x).mean().item()) < 1e-6
    assert gp.item() < 1e-10


def test_wgan_gp_penalty_reduces_large_gradients():
    # critic with gradient norm 2 should pay (2-1)^2 = 1 per sample
    class DoubleCritic(UnitGradientCritic):
        def forward(self, x):
            return 2.0 * super().forward(x)

    critic = DoubleCritic((2, 2, 2))
    x = torch.rand(4, 2, 2, 2, generator=torch.Generator().manual_seed(4))
    _, _, gp = wgan_gp_losses(critic, x, x.clone(), gp_weight=10.0)
    assert abs(gp.item() - 1.0) < 1e-6


def test_wgan_gp_argument_errors():
    critic = ConstantCritic(0.0)
    with pytest.raises(ValueError):
        wgan_gp_losses(critic, torch.zeros(2, 2, 4, 4), torch.zeros(2, 2, 8, 8))
    with pytest.raises(ValueError):
        wgan_gp_losses(critic, torch.zeros(2, 2, 4, 4), torch.zeros(2, 2, 4, 4),
                       gp_weight=-1.0)


# ------------------------------------------------------------- training

def tiny_dataset(n=48, seed=123):
    spec = data.default_world(num_classes=4, resolution=(8, 16))
    return data.generate_toy_dataset(spec, n, seed=seed)


def tiny_schedule(steps_per_stage):
    return ProgressiveSchedule(((4, 8), (8, 16)), steps_per_stage,
                               fadein_fraction=0.5)


def make_training_pair(seed=0):
    torch.manual_seed(seed)
    gen = SegGenerator(4, ((4, 8), (8, 16)), latent_dim=16,
                       base_channels=16, min_channels=8)
    critic = SegCritic(4, ((4, 8), (8, 16)), base_channels=16, min_channels=8)
    return gen, critic


def test_train_seg_zero_steps_is_noop():
    gen, critic = make_training_pair()
    before = {k: v.clone() for k, v in gen.state_dict().items()}
    metrics = train_seg(gen, critic, tiny_dataset(), tiny_schedule(0),
                        GumbelConfig(), SegTrainConfig(batch_size=4))
    assert metrics == []
    for k, v in gen.state_dict().items():
        assert torch.equal(v, before[k])


def test_train_seg_smoke_and_metrics():
    gen, critic = make_training_pair()
    before = {k: v.clone() for k, v in gen.state_dict().items()}
    checkpoints = []
    cfg = SegTrainConfig(batch_size=4, eval_interval=3, eval_samples=8,
                         checkpoint_interval=5, seed=9)
    metrics = train_seg(gen, critic, tiny_dataset(), tiny_schedule(6),
                        GumbelConfig(), cfg,
                        on_checkpoint=lambda s, st: checkpoints.append(s))
    assert any(not torch.equal(v, before[k]) for k, v in gen.state_dict().items())
    steps = [m["step"] for m in metrics]
    assert steps == sorted(steps) and steps[-1] == 11
    for m in metrics:
        assert set(m) == {"step", "stage", "alpha", "critic_loss",
                          "gen_loss", "gp", "hist_kl"}
        assert np.isfinite([m["critic_loss"], m["gen_loss"], m["gp"],
                            m["hist_kl"]]).all()
        assert m["hist_kl"] >= 0
    assert checkpoints == [4, 9, 11]
    assert metrics[0]["stage"] == 0 and metrics[-1]["stage"] == 1


def test_train_seg_resume_matches_uninterrupted_run():
    ds = tiny_dataset()
    sched = tiny_schedule(5)
    cfg = SegTrainConfig(batch_size=4, eval_interval=2, eval_samples=8,
                         checkpoint_interval=4, seed=31)

    gen_a, critic_a = make_training_pair(seed=77)
    full = train_seg(gen_a, critic_a, ds, sched, GumbelConfig(), cfg)

    gen_b, critic_b = make_training_pair(seed=77)
    saved = {}
    train_seg(gen_b, critic_b, ds, sched, GumbelConfig(), cfg, max_steps=4,
              on_checkpoint=lambda s, st: saved.update(step=s, state=st))
    assert saved["step"] == 3
    resumed = train_seg(gen_b, critic_b, ds, sched, GumbelConfig(), cfg,
                        start_step=saved["step"] + 1, opt_state=saved["state"])

    first = train_seg(gen_a, critic_a, ds, sched, GumbelConfig(), cfg,
                      start_step=sched.total_steps)  # no-op, sanity
    assert first == []
    for k in gen_a.state_dict():
        assert torch.equal(gen_a.state_dict()[k], gen_b.state_dict()[k])
    for k in critic_a.state_dict():
        assert torch.equal(critic_a.state_dict()[k], critic_b.state_dict()[k])
    tail = [m for m in full if m["step"] >= 4]
    assert resumed == tail


def test_train_seg_rejects_mismatched_dataset():
    gen, critic = make_training_pair()
    with pytest.raises(ValueError):
        train_seg(gen, critic, tiny_dataset(), ProgressiveSchedule(
            ((4, 4), (8, 8)), 5), GumbelConfig(), SegTrainConfig(batch_size=4))
