"""Unconditional discrete layout generator.

A progressively grown generator emits per-pixel class probabilities; sampling
goes through a Gumbel-softmax relaxation with a straight-through estimator so
the downstream consumer sees one-hot maps while gradients flow via the soft
relaxation. Training is Wasserstein with gradient penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import data, evaluation
from .utils import (TAG_BATCH, TAG_EVAL, TAG_GUMBEL, TAG_INTERP, TAG_LATENT,
                    check_finite, derive_seed, torch_generator)


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    eps: float = 1e-20

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class ProgressiveSchedule:
    """Stage plan: which resolution is active at a given step, and the fade-in
    weight used to blend a freshly added stage with the upsampled previous one.
    """

    stage_resolutions: tuple
    steps_per_stage: int
    fadein_fraction: float = 0.3

    def __post_init__(self):
        res = tuple(tuple(r) for r in self.stage_resolutions)
        object.__setattr__(self, "stage_resolutions", res)
        if not res:
            raise ValueError("need at least one stage")
        for (h, w) in res:
            if h < 1 or w < 1:
                raise ValueError(f"bad resolution {(h, w)}")
        for (h0, w0), (h1, w1) in zip(res, res[1:]):
            if (h1, w1) != (2 * h0, 2 * w0):
                raise ValueError(
                    f"stage {(h1, w1)} does not double {(h0, w0)}")
        if self.steps_per_stage < 0:
            raise ValueError("steps_per_stage must be >= 0")
        if not 0.0 <= self.fadein_fraction <= 1.0:
            raise ValueError("fadein_fraction must be in [0, 1]")

    @classmethod
    def from_final(cls, final_resolution, min_base: int = 4,
                   steps_per_stage: int = 400, fadein_fraction: float = 0.3):
        h, w = final_resolution
        n = 0
        while h % 2 == 0 and w % 2 == 0 and min(h, w) > min_base:
            h, w = h // 2, w // 2
            n += 1
        res = tuple((h << s, w << s) for s in range(n + 1))
        return cls(res, steps_per_stage, fadein_fraction)

    @property
    def n_stages(self) -> int:
        return len(self.stage_resolutions)

    @property
    def final_resolution(self):
        return self.stage_resolutions[-1]

    @property
    def total_steps(self) -> int:
        return self.n_stages * self.steps_per_stage

    def stage_at(self, step: int) -> tuple[int, float]:
        """Return (stage, alpha) for a global step index."""
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.steps_per_stage == 0:
            return self.n_stages - 1, 1.0
        stage = min(step // self.steps_per_stage, self.n_stages - 1)
        if stage == 0:
            return 0, 1.0
        fade = int(round(self.fadein_fraction * self.steps_per_stage))
        local = step - stage * self.steps_per_stage
        if fade == 0 or local >= fade:
            return stage, 1.0
        return stage, local / fade


def gumbel_from_uniform(u: torch.Tensor, eps: float = 1e-20) -> torch.Tensor:
    """Map uniform samples to standard Gumbel noise, -log(-log(u))."""
    return -torch.log(-torch.log(u + eps) + eps)


def sample_gumbel(shape, seed: int | None = None, *, eps: float = 1e-20,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Standard Gumbel noise with u drawn uniformly on [0, 1)."""
    if generator is None and seed is not None:
        generator = torch_generator(seed)
    return gumbel_from_uniform(torch.rand(shape, generator=generator), eps)


def gumbel_softmax(prob_map: torch.Tensor, noise: torch.Tensor,
                   cfg: GumbelConfig) -> torch.Tensor:
    """Relaxed categorical sample from per-pixel probabilities.

    prob_map has classes on dim -3 and must lie on the simplex there;
    noise has the same shape.
    """
    if prob_map.shape != noise.shape:
        raise ValueError("prob_map and noise shapes differ")
    sums = prob_map.sum(dim=-3)
    if prob_map.min() < 0 or (sums - 1.0).abs().max() > 1e-5:
        raise ValueError("prob_map rows are not on the probability simplex")
    logits = torch.log(prob_map + cfg.eps)
    return F.softmax((logits + noise) / cfg.tau, dim=-3)


def straight_through_discretize(soft: torch.Tensor,
                                backward: str = "soft") -> torch.Tensor:
    """One-hot argmax on the forward pass.

    backward="soft" routes gradients through the relaxed input unchanged;
    backward="zero" detaches entirely (diagnostic). Argmax ties resolve to
    the smallest class index.
    """
    if backward not in ("soft", "zero"):
        raise ValueError(f"unknown backward mode {backward!r}")
    top = soft.max(dim=-3, keepdim=True).values
    ismax = soft == top
    first = ismax & (ismax.cumsum(dim=-3) == 1)
    hard = first.to(soft.dtype)
    if backward == "zero":
        return hard.detach()
    return (hard - soft).detach() + soft


class SegGenerator(nn.Module):
    """Progressive generator mapping a latent vector to class logits."""

    def __init__(self, num_classes: int, stage_resolutions, latent_dim: int = 64,
                 base_channels: int = 64, min_channels: int = 16):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.stage_resolutions = tuple(tuple(r) for r in stage_resolutions)
        n = len(self.stage_resolutions)
        ch = [max(min_channels, base_channels >> s) for s in range(n)]
        self.channels = tuple(ch)
        h0, w0 = self.stage_resolutions[0]
        self.base_shape = (ch[0], h0, w0)
        self.fc = nn.Linear(latent_dim, ch[0] * h0 * w0)
        blocks = []
        for s in range(n):
            c_in = ch[s - 1] if s > 0 else ch[0]
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, ch[s], 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(ch[s], ch[s], 3, padding=1),
                nn.LeakyReLU(0.2)))
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList(
            [nn.Conv2d(ch[s], num_classes, 1) for s in range(n)])
        self._stage = n - 1
        self._alpha = 1.0

    @property
    def n_stages(self) -> int:
        return len(self.blocks)

    def set_stage(self, stage: int, alpha: float = 1.0) -> None:
        if not 0 <= stage < self.n_stages:
            raise RuntimeError(f"stage {stage} outside [0, {self.n_stages})")
        if not 0.0 <= alpha <= 1.0:
            raise RuntimeError(f"alpha {alpha} outside [0, 1]")
        self._stage = stage
        self._alpha = float(alpha)

    @property
    def current_stage(self) -> int:
        return self._stage

    @property
    def alpha(self) -> float:
        return self._alpha

    def current_resolution(self):
        return self.stage_resolutions[self._stage]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(
                f"latent must be (n, {self.latent_dim}), got {tuple(z.shape)}")
        x = self.fc(z).view(-1, *self.base_shape)
        x = F.leaky_relu(x, 0.2)
        x = self.blocks[0](x)
        prev = None
        for s in range(1, self._stage + 1):
            prev = x
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.blocks[s](x)
        logits = self.heads[self._stage](x)
        if self._alpha < 1.0 and self._stage > 0:
            coarse = self.heads[self._stage - 1](prev)
            coarse = F.interpolate(coarse, scale_factor=2, mode="nearest")
            logits = self._alpha * logits + (1.0 - self._alpha) * coarse
        return logits


class SegCritic(nn.Module):
    """Progressive Wasserstein critic over one-hot (or relaxed) label maps."""

    def __init__(self, num_classes: int, stage_resolutions,
                 base_channels: int = 64, min_channels: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.stage_resolutions = tuple(tuple(r) for r in stage_resolutions)
        n = len(self.stage_resolutions)
        ch = [max(min_channels, base_channels >> s) for s in range(n)]
        self.from_map = nn.ModuleList(
            [nn.Conv2d(num_classes, ch[s], 1) for s in range(n)])
        blocks = [nn.Sequential(
            nn.Conv2d(ch[0], ch[0], 3, padding=1), nn.LeakyReLU(0.2))]
        for s in range(1, n):
            blocks.append(nn.Sequential(
                nn.Conv2d(ch[s], ch[s], 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(ch[s], ch[s - 1], 3, padding=1),
                nn.LeakyReLU(0.2)))
        self.blocks = nn.ModuleList(blocks)
        h0, w0 = self.stage_resolutions[0]
        self.head = nn.Linear(ch[0] * h0 * w0, 1)
        self._stage = n - 1
        self._alpha = 1.0

    @property
    def n_stages(self) -> int:
        return len(self.blocks)

    def set_stage(self, stage: int, alpha: float = 1.0) -> None:
        if not 0 <= stage < self.n_stages:
            raise RuntimeError(f"stage {stage} outside [0, {self.n_stages})")
        if not 0.0 <= alpha <= 1.0:
            raise RuntimeError(f"alpha {alpha} outside [0, 1]")
        self._stage = stage
        self._alpha = float(alpha)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self._stage
        h, w = self.stage_resolutions[s]
        if x.ndim != 4 or x.shape[1] != self.num_classes or x.shape[-2:] != (h, w):
            raise ValueError(
                f"expected (n, {self.num_classes}, {h}, {w}), got {tuple(x.shape)}")
        y = F.leaky_relu(self.from_map[s](x), 0.2)
        for t in range(s, 0, -1):
            y = self.blocks[t](y)
            y = F.avg_pool2d(y, 2)
            if t == s and self._alpha < 1.0:
                skip = F.leaky_relu(self.from_map[s - 1](F.avg_pool2d(x, 2)), 0.2)
                y = self._alpha * y + (1.0 - self._alpha) * skip
        y = self.blocks[0](y)
        return self.head(y.flatten(1)).squeeze(1)


def generate_segmap(gen: SegGenerator, z: torch.Tensor, cfg: GumbelConfig,
                    seed: int | None = None,
                    generator: torch.Generator | None = None):
    """Sample label maps from the generator at its current stage.

    Returns (labels, soft, probs): integer maps from the straight-through
    argmax, the relaxed sample, and the underlying probabilities.
    """
    logits = gen(z)
    probs = F.softmax(logits, dim=-3)
    noise = sample_gumbel(probs.shape, seed=seed, eps=cfg.eps,
                          generator=generator).to(probs.dtype)
    soft = gumbel_softmax(probs, noise, cfg)
    hard = straight_through_discretize(soft)
    labels = hard.argmax(dim=-3)
    return labels, soft, probs


def wgan_gp_losses(critic, real: torch.Tensor, fake: torch.Tensor,
                   gp_weight: float = 10.0, *,
                   generator: torch.Generator | None = None):
    """Wasserstein critic/generator losses with gradient penalty.

    Returns (critic_loss, gen_loss, gp_term). The penalty pushes the critic's
    gradient norm toward 1 on uniform convex interpolates between real and
    fake. A critic that ignores its input gets a constant unit penalty.
    """
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    if gp_weight < 0:
        raise ValueError("gp_weight must be >= 0")
    score_real = critic(real)
    score_fake = critic(fake)
    n = real.shape[0]
    mix = torch.rand((n,) + (1,) * (real.ndim - 1), generator=generator,
                     dtype=real.dtype)
    x_hat = (mix * real + (1.0 - mix) * fake.detach()).requires_grad_(True)
    d_hat = critic(x_hat)
    grads = torch.autograd.grad(d_hat.sum(), x_hat, create_graph=True,
                                allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(x_hat)
    norms = grads.reshape(n, -1).norm(2, dim=1)
    gp_term = ((norms - 1.0) ** 2).mean()
    critic_loss = score_fake.mean() - score_real.mean() + gp_weight * gp_term
    gen_loss = -score_fake.mean()
    return critic_loss, gen_loss, gp_term


@dataclass
class SegTrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.0, 0.99)
    critic_steps: int = 1
    gp_weight: float = 10.0
    eval_interval: int = 25
    eval_samples: int = 64
    checkpoint_interval: int = 200
    seed: int = 0


def _sample_label_batch(gen, n, gumbel_cfg, seed):
    z = torch.randn(n, gen.latent_dim,
                    generator=torch_generator(derive_seed(seed, TAG_LATENT)))
    labels, _, _ = generate_segmap(gen, z, gumbel_cfg,
                                   seed=derive_seed(seed, TAG_GUMBEL))
    return labels


def train_seg(gen: SegGenerator, critic: SegCritic, dataset,
              schedule: ProgressiveSchedule, gumbel_cfg: GumbelConfig,
              cfg: SegTrainConfig, *, start_step: int = 0,
              max_steps: int | None = None, opt_state: dict | None = None,
              on_checkpoint=None, on_metrics=None) -> list[dict]:
    """Progressive Wasserstein training loop for the layout generator.

    Each step targets the resolution of the current stage; real maps are
    label-downsampled to match. Per-step randomness is derived from the
    config seed and the step index alone, so a resumed run continues exactly
    where an uninterrupted one would be. Returns metric rows recorded at
    ``eval_interval`` boundaries; ``on_checkpoint(step, opt_state)`` fires
    every ``checkpoint_interval`` steps and at the end.
    """
    real_maps = dataset.segmaps()
    final_h, final_w = schedule.final_resolution
    if real_maps.shape[1:] != (final_h, final_w):
        raise ValueError(
            f"dataset maps are {real_maps.shape[1:]}, schedule ends at "
            f"{(final_h, final_w)}")
    if real_maps.max() >= gen.num_classes:
        raise ValueError("dataset labels exceed generator classes")
    sched_end = schedule.total_steps
    total = sched_end
    if max_steps is not None:
        total = min(total, start_step + max_steps)

    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_c = torch.optim.Adam(critic.parameters(), lr=cfg.lr, betas=cfg.betas)
    if opt_state is not None:
        opt_g.load_state_dict(opt_state["opt_g"])
        opt_c.load_state_dict(opt_state["opt_c"])

    metrics = []
    for step in range(start_step, total):
        stage, alpha = schedule.stage_at(step)
        gen.set_stage(stage, alpha)
        critic.set_stage(stage, alpha)
        stage_h = schedule.stage_resolutions[stage][0]
        factor = final_h // stage_h

        rng = np.random.default_rng(derive_seed(cfg.seed, TAG_BATCH, step))
        c_loss = gp = torch.tensor(0.0)
        for k in range(cfg.critic_steps):
            idx = rng.integers(0, real_maps.shape[0], size=cfg.batch_size)
            real_lab = data.downsample_labels(real_maps[idx], factor)
            real = torch.from_numpy(data.one_hot(real_lab, gen.num_classes))
            with torch.no_grad():
                fake_lab = _sample_label_batch(
                    gen, cfg.batch_size, gumbel_cfg,
                    derive_seed(cfg.seed, TAG_GUMBEL, step, k))
            fake = torch.from_numpy(
                data.one_hot(fake_lab.numpy(), gen.num_classes))
            c_loss, _, gp = wgan_gp_losses(
                critic, real, fake, cfg.gp_weight,
                generator=torch_generator(derive_seed(cfg.seed, TAG_INTERP, step, k)))
            opt_c.zero_grad()
            c_loss.backward()
            opt_c.step()

        z = torch.randn(cfg.batch_size, gen.latent_dim,
                        generator=torch_generator(
                            derive_seed(cfg.seed, TAG_LATENT, step)))
        _, soft, _ = generate_segmap(
            gen, z, gumbel_cfg, seed=derive_seed(cfg.seed, TAG_GUMBEL, step))
        hard = straight_through_discretize(soft)
        g_loss = -critic(hard).mean()
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        check_finite("critic_loss", c_loss)
        check_finite("gen_loss", g_loss)

        # Rows key off the schedule end, not this invocation's stopping
        # point, so an interrupted run logs the same steps as a whole one.
        if step % cfg.eval_interval == 0 or step == sched_end - 1:
            with torch.no_grad():
                sample_lab = _sample_label_batch(
                    gen, cfg.eval_samples, gumbel_cfg,
                    derive_seed(cfg.seed, TAG_EVAL, step)).numpy()
            real_ref = data.downsample_labels(real_maps, factor)
            hist_kl = evaluation.class_frequency_kl(
                data.class_histogram(sample_lab, gen.num_classes),
                data.class_histogram(real_ref, gen.num_classes))
            row = {
                "step": step, "stage": stage, "alpha": alpha,
                "critic_loss": c_loss.item(), "gen_loss": g_loss.item(),
                "gp": gp.item(), "hist_kl": hist_kl,
            }
            metrics.append(row)
            if on_metrics is not None:
                on_metrics(row)
        if on_checkpoint is not None and (
                (step + 1) % cfg.checkpoint_interval == 0 or step == total - 1):
            on_checkpoint(step, {"opt_g": opt_g.state_dict(),
                                 "opt_c": opt_c.state_dict()})
    return metrics
