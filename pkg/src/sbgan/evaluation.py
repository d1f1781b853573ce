"""Fréchet-distance evaluation and layout-statistics metrics.

Feature embeddings come from a fixed, seeded random feature pyramid (see
``imgsynth.SurrogateFeatureExtractor``), so distances are comparable only
within this codebase; a pretrained embedder can be dropped in behind the
same ``embed`` interface.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import data
from .utils import TAG_EVAL, TAG_TRIAL, derive_seed, images_to_tensor

EIG_WARN_TOL = -1e-6


@dataclass
class GaussianStats:
    mu: np.ndarray      # (d,)
    sigma: np.ndarray   # (d, d)


def fit_gaussian(features) -> GaussianStats:
    """Empirical mean and unbiased covariance of an (n, d) feature matrix."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected (n, d) matrix, got shape {f.shape}")
    if f.shape[0] < 2:
        raise ValueError("need at least 2 feature rows to fit a Gaussian")
    mu = f.mean(axis=0)
    x = f - mu
    sigma = x.T @ x / (f.shape[0] - 1)
    return GaussianStats(mu=mu, sigma=(sigma + sigma.T) / 2)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Fréchet distance between two Gaussians.

    The trace of the matrix square root is taken from the eigenvalues of the
    symmetrized product sqrt(Sa) Sb sqrt(Sa); eigenvalues below a small
    negative tolerance trigger a warning, the rest are clamped to zero.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError("dimension mismatch between Gaussian stats")
    diff = a.mu - b.mu
    sa_half = _psd_sqrt(a.sigma)
    m = sa_half @ b.sigma @ sa_half
    w = np.linalg.eigh((m + m.T) / 2)[0]
    if w.min() < EIG_WARN_TOL:
        warnings.warn(
            f"covariance product has eigenvalue {w.min():.3e} below tolerance",
            RuntimeWarning)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    val = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(val, 0.0)


class SurrogateEmbedder:
    """Deterministic image-to-vector embedder: pooled random-pyramid features."""

    def __init__(self, extractor=None, seed: int = 1234, device: str = "cpu"):
        if extractor is None:
            from .imgsynth import SurrogateFeatureExtractor
            extractor = SurrogateFeatureExtractor(seed=seed).to(device)
        self.extractor = extractor
        self.dim = sum(extractor.channels)
        self.embedder_id = f"surrogate-gap{self.dim}-seed{extractor.seed}"

    def embed(self, images, batch_size: int = 64) -> np.ndarray:
        t = images_to_tensor(images)
        device = next(self.extractor.parameters()).device
        out = []
        with torch.no_grad():
            for i in range(0, t.shape[0], batch_size):
                feats = self.extractor(t[i:i + batch_size].to(device))
                pooled = torch.cat([f.mean(dim=(-1, -2)) for f in feats], dim=1)
                out.append(pooled.cpu().double().numpy())
        return np.concatenate(out, axis=0)


def evaluate_fid(model_sampler, real_images, emb, n_per_trial: int = 500,
                 trials: int = 5, seed: int = 0) -> tuple[float, list[float]]:
    """Average Fréchet distance over repeated trials.

    Each trial embeds ``n_per_trial`` fresh synthetic images from
    ``model_sampler(n, seed)`` and an equally sized random subset of the
    real images.
    """
    real_t = images_to_tensor(real_images)
    m = real_t.shape[0]
    if m < n_per_trial:
        raise ValueError(f"need at least {n_per_trial} real images, have {m}")
    scores = []
    for t in range(trials):
        rng = np.random.default_rng(derive_seed(seed, TAG_TRIAL, t))
        idx = rng.choice(m, size=n_per_trial, replace=False)
        fake = model_sampler(n_per_trial, derive_seed(seed, TAG_EVAL, t))
        stats_real = fit_gaussian(emb.embed(real_t[idx]))
        stats_fake = fit_gaussian(emb.embed(fake))
        scores.append(frechet_distance(stats_real, stats_fake))
    return float(np.mean(scores)), scores


def eval_conditioned_on_gt(g_spd, val_dataset, emb, batch_size: int = 32) -> float:
    """Fréchet distance of images synthesized from ground-truth layouts."""
    maps = val_dataset.segmaps()
    images = val_dataset.images()
    synth = []
    with torch.no_grad():
        for i in range(0, len(maps), batch_size):
            labels = torch.from_numpy(maps[i:i + batch_size])
            synth.append(g_spd.synthesize(labels).cpu())
    synth = torch.cat(synth, dim=0)
    stats_real = fit_gaussian(emb.embed(images))
    stats_fake = fit_gaussian(emb.embed(synth))
    return frechet_distance(stats_real, stats_fake)


def class_frequency_kl(p: np.ndarray, q: np.ndarray, smoothing: float = 1e-8) -> float:
    """KL(p || q) between two frequency vectors with additive smoothing."""
    ps = np.asarray(p, dtype=np.float64) + smoothing
    qs = np.asarray(q, dtype=np.float64) + smoothing
    ps /= ps.sum()
    qs /= qs.sum()
    return float((ps * np.log(ps / qs)).sum())


def layout_divergence(gen_maps, real_maps, num_classes: int):
    """Class-frequency KL(gen || real) plus per-class area statistics."""
    gen = np.asarray(gen_maps)
    real = np.asarray(real_maps)
    for name, maps in (("generated", gen), ("real", real)):
        if maps.min() < 0 or maps.max() >= num_classes:
            raise ValueError(f"{name} maps have labels outside [0, {num_classes})")
    kl = class_frequency_kl(
        data.class_histogram(gen, num_classes),
        data.class_histogram(real, num_classes))

    def area_fractions(maps):
        n = maps.shape[0]
        fr = np.zeros((n, num_classes))
        for i in range(n):
            fr[i] = np.bincount(maps[i].ravel(), minlength=num_classes) / maps[i].size
        return fr

    gf, rf = area_fractions(gen), area_fractions(real)
    stats = {
        "gen_area_mean": gf.mean(axis=0), "gen_area_var": gf.var(axis=0),
        "real_area_mean": rf.mean(axis=0), "real_area_var": rf.var(axis=0),
    }
    return kl, stats


def region_color_accuracy(images, segmaps, class_colors, tol: float = 0.15,
                          min_pixels: int = 8) -> tuple[float, int]:
    """Fraction of class regions whose mean color is within tol of its reference.

    A region is the pixel set of one class in one sample; tiny regions below
    ``min_pixels`` are skipped. Distance is the max channel difference.
    """
    t = images_to_tensor(images).permute(0, 2, 3, 1).numpy()
    maps = np.asarray(segmaps)
    colors = np.asarray(class_colors, dtype=np.float64)
    hits = total = 0
    for img, seg in zip(t, maps):
        for cls in np.unique(seg):
            mask = seg == cls
            if mask.sum() < min_pixels:
                continue
            mean_color = img[mask].mean(axis=0)
            total += 1
            if np.abs(mean_color - colors[cls]).max() <= tol:
                hits += 1
    return (hits / total if total else 0.0), total
