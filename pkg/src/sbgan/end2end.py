"""Joint fine-tuning of the layout generator and the image synthesizer.

After both stages pretrain separately, the pipeline is composed: latents
become discrete layouts, layouts become images, and an unconditional image
discriminator scores the result so layout mistakes that only show up as bad
pixels can push gradients back through the straight-through estimator into
the layout generator. The pretraining losses stay on as regularizers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from . import data, evaluation, imgsynth, seggen
from .utils import (TAG_BATCH, TAG_EVAL, TAG_GUMBEL, TAG_INTERP, TAG_LATENT,
                    check_finite, derive_seed, torch_generator,
                    images_to_tensor)


class UncondDiscriminator(nn.Module):
    """Patch discriminator over images alone (no layout conditioning)."""

    def __init__(self, base_channels: int = 64, n_layers: int = 3,
                 max_channels: int = 256):
        super().__init__()
        layers = []
        c_in = 3
        c_out = base_channels
        for i in range(n_layers):
            stride = 2 if i < n_layers - 1 else 1
            layers.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, 4, stride=stride, padding=1),
                nn.LeakyReLU(0.2)))
            c_in, c_out = c_out, min(c_out * 2, max_channels)
        self.body = nn.Sequential(*layers)
        self.score = nn.Conv2d(c_in, 1, 4, stride=1, padding=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (n, 3, h, w) images, got "
                             f"{tuple(image.shape)}")
        return self.score(self.body(image))


def compose_generate(g_sb, g_spd, z: torch.Tensor, gumbel_cfg,
                     *, seed: int | None = None, estimator_enabled: bool = True):
    """Run latents through both stages; returns (labels, images).

    The renderer consumes the straight-through one-hot maps, so image losses
    reach the layout generator unless ``estimator_enabled`` is off (a
    diagnostic mode that severs that path).
    """
    if g_sb.num_classes != g_spd.num_classes:
        raise ValueError(
            f"layout generator has {g_sb.num_classes} classes, renderer "
            f"expects {g_spd.num_classes}")
    _, soft, _ = seggen.generate_segmap(g_sb, z, gumbel_cfg, seed=seed)
    mode = "soft" if estimator_enabled else "zero"
    hard = seggen.straight_through_discretize(soft, backward=mode)
    labels = hard.argmax(dim=-3)
    images = g_spd(hard)
    return labels, images


def d2_losses(d2: UncondDiscriminator, real: torch.Tensor, fake: torch.Tensor):
    """Hinge losses for the unconditional discriminator and the generator."""
    d_loss = imgsynth.hinge_d_loss(d2(real), d2(fake.detach()))
    g_adv = imgsynth.hinge_g_loss(d2(fake))
    return d_loss, g_adv


def joint_generator_loss(uncond_term, spd_term, sb_term, lambda_sb: float = 10.0):
    """Total generator objective: image terms plus weighted layout term."""
    for name, v in (("uncond_term", uncond_term), ("spd_term", spd_term),
                    ("sb_term", sb_term)):
        check_finite(name, v)
    return uncond_term + spd_term + lambda_sb * sb_term


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 8
    lambda_sb: float = 10.0
    lr_sb: float = 1e-5
    lr_sb_critic: float = 1e-5
    lr_spd_g: float = 1e-4
    lr_spd_d: float = 4e-4
    lr_d2: float = 4e-4
    betas: tuple = (0.0, 0.999)
    gp_weight: float = 10.0
    lambda_perc: float = 10.0
    lambda_fm: float = 10.0
    ft_sb: bool = True
    ft_spade: bool = True
    eval_interval: int = 25
    checkpoint_interval: int = 200
    seed: int = 0


def finetune(g_sb, critic_sb, g_spd, d_spd, d2, extractor, dataset,
             gumbel_cfg, cfg: FinetuneConfig, *, start_step: int = 0,
             max_steps: int | None = None, opt_state: dict | None = None,
             on_checkpoint=None, on_metrics=None) -> list[dict]:
    """Composed training: update discriminators, then both generators jointly.

    The image-only discriminator judges composed fakes (generated layout ->
    image); the conditional pathway keeps training on real (layout, image)
    pairs exactly as in pretraining, so the paired reconstruction losses
    never compare images with unrelated layouts. ``ft_sb`` / ``ft_spade``
    freeze either stage (parameters stay bit identical); the frozen stage
    still participates in the forward pass. Logged generator components
    always satisfy g_total = g_uncond + g_spd + lambda_sb * g_sb.
    """
    maps = dataset.segmaps()
    images = dataset.images()
    final_res = tuple(g_sb.stage_resolutions[-1])
    if tuple(g_spd.resolution) != final_res:
        raise ValueError(f"layout generator ends at {final_res}, renderer "
                         f"expects {tuple(g_spd.resolution)}")
    if maps.shape[1:] != final_res:
        raise ValueError(f"dataset maps are {maps.shape[1:]}, pipeline "
                         f"renders {final_res}")
    if g_sb.num_classes != g_spd.num_classes:
        raise ValueError("class count mismatch between stages")
    if maps.max() >= g_sb.num_classes:
        raise ValueError("dataset labels exceed generator classes")

    g_sb.set_stage(g_sb.n_stages - 1, 1.0)
    critic_sb.set_stage(critic_sb.n_stages - 1, 1.0)
    for p in g_sb.parameters():
        p.requires_grad_(cfg.ft_sb)
    for p in critic_sb.parameters():
        p.requires_grad_(cfg.ft_sb)
    for p in g_spd.parameters():
        p.requires_grad_(cfg.ft_spade)
    for p in d_spd.parameters():
        p.requires_grad_(cfg.ft_spade)

    groups = []
    if cfg.ft_sb:
        groups.append({"params": list(g_sb.parameters()), "lr": cfg.lr_sb})
    if cfg.ft_spade:
        groups.append({"params": list(g_spd.parameters()), "lr": cfg.lr_spd_g})
    opt_gen = torch.optim.Adam(groups, lr=cfg.lr_sb, betas=cfg.betas) if groups else None
    opt_d2 = torch.optim.Adam(d2.parameters(), lr=cfg.lr_d2, betas=cfg.betas)
    opt_dspd = (torch.optim.Adam(d_spd.parameters(), lr=cfg.lr_spd_d,
                                 betas=cfg.betas) if cfg.ft_spade else None)
    opt_csb = (torch.optim.Adam(critic_sb.parameters(), lr=cfg.lr_sb_critic,
                                betas=cfg.betas) if cfg.ft_sb else None)
    if opt_state is not None:
        for key, opt in (("opt_gen", opt_gen), ("opt_d2", opt_d2),
                         ("opt_dspd", opt_dspd), ("opt_csb", opt_csb)):
            if opt is not None and opt_state.get(key) is not None:
                opt.load_state_dict(opt_state[key])

    total_steps = cfg.steps
    if max_steps is not None:
        total_steps = min(total_steps, start_step + max_steps)

    metrics = []
    for step in range(start_step, total_steps):
        rng = np.random.default_rng(derive_seed(cfg.seed, TAG_BATCH, step))
        idx = rng.integers(0, maps.shape[0], size=cfg.batch_size)
        real = images_to_tensor(images[idx])
        seg_real = torch.from_numpy(data.one_hot(maps[idx], g_sb.num_classes))

        z = torch.randn(cfg.batch_size, g_sb.latent_dim,
                        generator=torch_generator(
                            derive_seed(cfg.seed, TAG_LATENT, step)))
        _, soft, _ = seggen.generate_segmap(
            g_sb, z, gumbel_cfg, seed=derive_seed(cfg.seed, TAG_GUMBEL, step))
        hard = seggen.straight_through_discretize(soft)
        fake = g_spd(hard)
        fake_cond = g_spd(seg_real)

        d2_loss = imgsynth.hinge_d_loss(d2(real), d2(fake.detach()))
        opt_d2.zero_grad()
        d2_loss.backward()
        opt_d2.step()

        real_scores, _ = d_spd(seg_real, real)
        fake_scores, _ = d_spd(seg_real, fake_cond.detach())
        d_spd_loss = imgsynth.hinge_d_loss(real_scores, fake_scores)
        if opt_dspd is not None:
            opt_dspd.zero_grad()
            d_spd_loss.backward()
            opt_dspd.step()

        csb_loss, _, _ = seggen.wgan_gp_losses(
            critic_sb, seg_real, hard.detach(), cfg.gp_weight,
            generator=torch_generator(derive_seed(cfg.seed, TAG_INTERP, step)))
        if opt_csb is not None:
            opt_csb.zero_grad()
            csb_loss.backward()
            opt_csb.step()

        g_uncond = imgsynth.hinge_g_loss(d2(fake))
        spd_scores, fake_feats = d_spd(seg_real, fake_cond)
        with torch.no_grad():
            _, real_feats = d_spd(seg_real, real)
        g_spd_term = (imgsynth.hinge_g_loss(spd_scores)
                      + cfg.lambda_perc * imgsynth.perceptual_l1(extractor,
                                                                 fake_cond, real)
                      + cfg.lambda_fm * imgsynth.feature_matching_l1(real_feats,
                                                                     fake_feats))
        g_sb_term = -critic_sb(hard).mean()
        g_total = joint_generator_loss(g_uncond, g_spd_term, g_sb_term,
                                       cfg.lambda_sb)
        if opt_gen is not None:
            opt_gen.zero_grad()
            g_total.backward()
            opt_gen.step()

        # Rows key off the configured run length so interrupted and whole
        # runs log identical step sets.
        if step % cfg.eval_interval == 0 or step == cfg.steps - 1:
            row = {
                "step": step, "d2_loss": d2_loss.item(),
                "d_spd_loss": d_spd_loss.item(),
                "sb_critic_loss": csb_loss.item(),
                "g_uncond": g_uncond.item(), "g_spd": g_spd_term.item(),
                "g_sb": g_sb_term.item(), "g_total": g_total.item(),
            }
            metrics.append(row)
            if on_metrics is not None:
                on_metrics(row)
        if on_checkpoint is not None and (
                (step + 1) % cfg.checkpoint_interval == 0
                or step == total_steps - 1):
            on_checkpoint(step, {
                "opt_gen": opt_gen.state_dict() if opt_gen else None,
                "opt_d2": opt_d2.state_dict(),
                "opt_dspd": opt_dspd.state_dict() if opt_dspd else None,
                "opt_csb": opt_csb.state_dict() if opt_csb else None,
            })
    return metrics


def compose_sampler(g_sb, g_spd, gumbel_cfg, batch_size: int = 64):
    """Image sampler over the composed pipeline, keyed by (n, seed)."""
    def sampler(n: int, seed: int) -> torch.Tensor:
        out = []
        done = 0
        i = 0
        with torch.no_grad():
            while done < n:
                b = min(batch_size, n - done)
                z = torch.randn(b, g_sb.latent_dim,
                                generator=torch_generator(
                                    derive_seed(seed, TAG_LATENT, i)))
                _, imgs = compose_generate(
                    g_sb, g_spd, z, gumbel_cfg,
                    seed=derive_seed(seed, TAG_GUMBEL, i))
                out.append(imgs)
                done += b
                i += 1
        return torch.cat(out, dim=0)[:n]
    return sampler


def sample_layouts(g_sb, gumbel_cfg, n: int, seed: int,
                   batch_size: int = 64) -> np.ndarray:
    """Integer label maps sampled from the layout generator."""
    out = []
    done = 0
    i = 0
    with torch.no_grad():
        while done < n:
            b = min(batch_size, n - done)
            z = torch.randn(b, g_sb.latent_dim,
                            generator=torch_generator(
                                derive_seed(seed, TAG_LATENT, i)))
            labels, _, _ = seggen.generate_segmap(
                g_sb, z, gumbel_cfg, seed=derive_seed(seed, TAG_GUMBEL, i))
            out.append(labels.numpy())
            done += b
            i += 1
    return np.concatenate(out, axis=0)[:n]


ABLATION_SETTINGS = (
    ("none", False, False),
    ("sb", True, False),
    ("spade", False, True),
    ("both", True, True),
)


def run_ablation(make_models, make_d2, dataset, gumbel_cfg,
                 cfg: FinetuneConfig, emb, *, n_per_trial: int = 500,
                 trials: int = 5, eval_seed: int = 0,
                 layout_samples: int = 256, eval_dataset=None) -> list[dict]:
    """Fine-tune from the same pretrained weights under each freeze setting.

    ``make_models()`` must return freshly loaded (g_sb, critic_sb, g_spd,
    d_spd, extractor) so every setting starts from identical weights; the
    baseline setting runs no fine-tuning steps. Scores compare against
    ``eval_dataset`` when given (typically a held-out split), otherwise the
    training data. Returns one row per setting with the composed-pipeline
    image distance and layout histogram KL.
    """
    ref = eval_dataset if eval_dataset is not None else dataset
    real_images = ref.images()
    real_maps = ref.segmaps()
    rows = []
    for setting, ft_sb, ft_spade in ABLATION_SETTINGS:
        g_sb, critic_sb, g_spd, d_spd, extractor = make_models()
        d2 = make_d2()
        steps = 0 if setting == "none" else cfg.steps
        run_cfg = replace(cfg, ft_sb=ft_sb, ft_spade=ft_spade, steps=steps)
        if steps > 0:
            finetune(g_sb, critic_sb, g_spd, d_spd, d2, extractor, dataset,
                     gumbel_cfg, run_cfg)
        g_sb.set_stage(g_sb.n_stages - 1, 1.0)
        fid, _ = evaluation.evaluate_fid(
            compose_sampler(g_sb, g_spd, gumbel_cfg), real_images, emb,
            n_per_trial=n_per_trial, trials=trials, seed=eval_seed)
        gen_maps = sample_layouts(g_sb, gumbel_cfg, layout_samples,
                                  derive_seed(eval_seed, TAG_EVAL))
        hist_kl = evaluation.class_frequency_kl(
            data.class_histogram(gen_maps, g_sb.num_classes),
            data.class_histogram(real_maps, g_sb.num_classes))
        rows.append({"setting": setting, "fid": fid, "hist_kl": hist_kl,
                     "steps": steps, "seed": cfg.seed})
    return rows
