"""Layout-conditioned image synthesis.

The generator modulates normalized activations with per-pixel scale and shift
maps predicted from the one-hot layout (spatially adaptive normalization), so
label information reaches every depth instead of only the input. Training
pairs a patch discriminator with hinge losses plus perceptual and
feature-matching terms; both auxiliary terms use fixed feature extractors, a
seeded random pyramid standing in for a pretrained network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import data
from .utils import (TAG_BATCH, check_finite, derive_seed, images_to_tensor)

VAR_EPS = 1e-5


class SpadeNorm(nn.Module):
    """Normalize per sample and channel, then scale/shift from the layout."""

    def __init__(self, channels: int, num_classes: int, hidden: int = 32):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.shared = nn.Sequential(
            nn.Conv2d(num_classes, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.ones_(self.gamma.bias)
        nn.init.zeros_(self.beta.bias)

    def forward(self, act: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        if act.shape[1] != self.channels:
            raise RuntimeError(
                f"activation has {act.shape[1]} channels, layer expects "
                f"{self.channels}")
        if seg.shape[1] != self.num_classes:
            raise RuntimeError(
                f"layout has {seg.shape[1]} classes, layer expects "
                f"{self.num_classes}")
        if seg.shape[-2:] != act.shape[-2:]:
            seg = F.interpolate(seg, size=act.shape[-2:], mode="nearest")
        mu = act.mean(dim=(2, 3), keepdim=True)
        var = act.var(dim=(2, 3), keepdim=True, unbiased=False)
        x = (act - mu) / torch.sqrt(var + VAR_EPS)
        h = self.shared(seg)
        return self.gamma(h) * x + self.beta(h)


class SpadeResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, num_classes: int, hidden: int = 32):
        super().__init__()
        mid = min(c_in, c_out)
        self.norm0 = SpadeNorm(c_in, num_classes, hidden)
        self.conv0 = nn.Conv2d(c_in, mid, 3, padding=1)
        self.norm1 = SpadeNorm(mid, num_classes, hidden)
        self.conv1 = nn.Conv2d(mid, c_out, 3, padding=1)
        self.learned_skip = c_in != c_out
        if self.learned_skip:
            self.norm_s = SpadeNorm(c_in, num_classes, hidden)
            self.conv_s = nn.Conv2d(c_in, c_out, 1, bias=False)

    def forward(self, x: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        dx = self.conv0(F.leaky_relu(self.norm0(x, seg), 0.2))
        dx = self.conv1(F.leaky_relu(self.norm1(dx, seg), 0.2))
        skip = self.conv_s(self.norm_s(x, seg)) if self.learned_skip else x
        return skip + dx


def _n_up_levels(resolution, min_base: int = 4) -> int:
    h, w = resolution
    n = 0
    while h % 2 == 0 and w % 2 == 0 and min(h, w) > min_base:
        h, w = h // 2, w // 2
        n += 1
    return n


class SpadeGenerator(nn.Module):
    """Upsampling stack of layout-modulated residual blocks."""

    def __init__(self, num_classes: int, resolution, base_channels: int = 64,
                 min_channels: int = 16, hidden: int = 32,
                 z_dim: int | None = None):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.resolution = tuple(resolution)
        n_up = _n_up_levels(self.resolution)
        ch = [max(min_channels, base_channels >> i) for i in range(n_up + 1)]
        h, w = self.resolution
        self.base_shape = (ch[0], h >> n_up, w >> n_up)
        self.z_dim = z_dim
        if z_dim is not None:
            self.fc = nn.Linear(z_dim, int(np.prod(self.base_shape)))
        else:
            self.const = nn.Parameter(torch.randn(1, *self.base_shape))
        blocks = [SpadeResBlock(ch[0], ch[0], num_classes, hidden)]
        for i in range(n_up):
            blocks.append(SpadeResBlock(ch[i], ch[i + 1], num_classes, hidden))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(ch[-1], 3, 3, padding=1)

    def forward(self, seg: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        if seg.ndim != 4 or seg.shape[1] != self.num_classes:
            raise ValueError(
                f"layout must be (n, {self.num_classes}, h, w), got "
                f"{tuple(seg.shape)}")
        if seg.shape[-2:] != self.resolution:
            raise ValueError(
                f"layout is {tuple(seg.shape[-2:])}, generator renders "
                f"{self.resolution}")
        n = seg.shape[0]
        if self.z_dim is not None:
            if z is None or z.shape != (n, self.z_dim):
                raise ValueError(f"need latent of shape ({n}, {self.z_dim})")
            x = self.fc(z).view(n, *self.base_shape)
        else:
            x = self.const.expand(n, -1, -1, -1)
        x = self.blocks[0](x, seg)
        for blk in self.blocks[1:]:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = blk(x, seg)
        return torch.sigmoid(self.to_rgb(F.leaky_relu(x, 0.2)))

    def synthesize(self, labels: torch.Tensor,
                   z: torch.Tensor | None = None) -> torch.Tensor:
        """Render images from integer label maps."""
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(
                f"labels outside [0, {self.num_classes})")
        seg = F.one_hot(labels.long(), self.num_classes)
        seg = seg.permute(0, 3, 1, 2).float()
        return self.forward(seg, z)


class CondDiscriminator(nn.Module):
    """Patch discriminator over the layout/image pair.

    Returns per-patch scores plus the intermediate features used for the
    feature-matching loss.
    """

    def __init__(self, num_classes: int, base_channels: int = 64,
                 n_layers: int = 3, max_channels: int = 256):
        super().__init__()
        self.num_classes = num_classes
        layers = []
        c_in = num_classes + 3
        c_out = base_channels
        for i in range(n_layers):
            stride = 2 if i < n_layers - 1 else 1
            layers.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, 4, stride=stride, padding=1),
                nn.LeakyReLU(0.2)))
            c_in, c_out = c_out, min(c_out * 2, max_channels)
        self.body = nn.ModuleList(layers)
        self.score = nn.Conv2d(c_in, 1, 4, stride=1, padding=1)

    def forward(self, seg: torch.Tensor, image: torch.Tensor):
        if seg.shape[1] != self.num_classes:
            raise ValueError(f"layout has {seg.shape[1]} classes, expected "
                             f"{self.num_classes}")
        if image.shape[1] != 3 or image.shape[-2:] != seg.shape[-2:]:
            raise ValueError("image must be (n, 3, h, w) matching the layout")
        x = torch.cat([seg, image], dim=1)
        feats = []
        for layer in self.body:
            x = layer(x)
            feats.append(x)
        return self.score(x), feats


class SurrogateFeatureExtractor(nn.Module):
    """Frozen random conv pyramid standing in for a pretrained feature net.

    Weights are drawn from a dedicated generator so the same seed always
    yields the same features, independent of global RNG state.
    """

    def __init__(self, seed: int = 1234, channels=(32, 64, 96)):
        super().__init__()
        self.seed = seed
        self.channels = tuple(channels)
        g = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in self.channels:
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g)
                                  * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (n, 3, h, w) images, got {tuple(x.shape)}")
        feats = []
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Hinge discriminator loss; zero scores on both sides give exactly 2."""
    return (F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean())


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def perceptual_l1(extractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between pyramid features of two image batches."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa = extractor(a)
    fb = extractor(b)
    terms = [F.l1_loss(x, y) for x, y in zip(fa, fb)]
    return torch.stack(terms).mean()


def feature_matching_l1(real_feats, fake_feats) -> torch.Tensor:
    """Mean L1 distance between discriminator feature lists (real detached)."""
    if len(real_feats) != len(fake_feats):
        raise ValueError("feature lists have different lengths")
    terms = [F.l1_loss(f, r.detach()) for r, f in zip(real_feats, fake_feats)]
    return torch.stack(terms).mean()


@dataclass
class SpadeTrainConfig:
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    betas: tuple = (0.0, 0.999)
    lambda_perc: float = 10.0
    lambda_fm: float = 10.0
    eval_interval: int = 25
    checkpoint_interval: int = 200
    steps: int = 600
    seed: int = 0


def train_spade(gen: SpadeGenerator, disc: CondDiscriminator, extractor,
                dataset, cfg: SpadeTrainConfig, *, start_step: int = 0,
                max_steps: int | None = None, opt_state: dict | None = None,
                on_checkpoint=None, on_metrics=None) -> list[dict]:
    """Adversarial reconstruction training on (layout, image) pairs.

    The discriminator sees detached renders; the generator minimizes its
    adversarial score plus weighted perceptual and feature-matching terms.
    Batch selection depends only on the seed and step index, so resumed runs
    continue exactly. Returns metric rows at ``eval_interval`` boundaries.
    """
    maps = dataset.segmaps()
    images = dataset.images()
    if maps.shape[1:] != gen.resolution:
        raise ValueError(f"dataset maps are {maps.shape[1:]}, generator "
                         f"renders {gen.resolution}")
    if maps.max() >= gen.num_classes:
        raise ValueError("dataset labels exceed generator classes")
    total = cfg.steps
    if max_steps is not None:
        total = min(total, start_step + max_steps)

    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=cfg.betas)
    if opt_state is not None:
        opt_g.load_state_dict(opt_state["opt_g"])
        opt_d.load_state_dict(opt_state["opt_d"])

    metrics = []
    for step in range(start_step, total):
        rng = np.random.default_rng(derive_seed(cfg.seed, TAG_BATCH, step))
        idx = rng.integers(0, maps.shape[0], size=cfg.batch_size)
        seg = torch.from_numpy(data.one_hot(maps[idx], gen.num_classes))
        real = images_to_tensor(images[idx])

        fake = gen(seg)

        real_scores, _ = disc(seg, real)
        fake_scores, _ = disc(seg, fake.detach())
        d_loss = hinge_d_loss(real_scores, fake_scores)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        fake_scores, fake_feats = disc(seg, fake)
        with torch.no_grad():
            _, real_feats = disc(seg, real)
        g_adv = hinge_g_loss(fake_scores)
        perc = perceptual_l1(extractor, fake, real)
        fm = feature_matching_l1(real_feats, fake_feats)
        g_loss = g_adv + cfg.lambda_perc * perc + cfg.lambda_fm * fm
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        check_finite("d_loss", d_loss)
        check_finite("g_loss", g_loss)

        # Rows key off the configured run length so interrupted and whole
        # runs log identical step sets.
        if step % cfg.eval_interval == 0 or step == cfg.steps - 1:
            row = {
                "step": step, "d_loss": d_loss.item(), "g_adv": g_adv.item(),
                "perceptual": perc.detach().item(), "feat_match": fm.detach().item(),
            }
            metrics.append(row)
            if on_metrics is not None:
                on_metrics(row)
        if on_checkpoint is not None and (
                (step + 1) % cfg.checkpoint_interval == 0 or step == total - 1):
            on_checkpoint(step, {"opt_g": opt_g.state_dict(),
                                 "opt_d": opt_d.state_dict()})
    return metrics
