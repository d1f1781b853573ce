"""Seed derivation and small shared helpers.

Every stochastic operation in the package draws from a generator seeded by
``derive_seed(master, tag, *indices)``. Randomness is therefore a pure
function of (master seed, purpose tag, step index), which is what makes
checkpoint resume reproduce an uninterrupted run bit for bit.
"""

from __future__ import annotations

import numpy as np
import torch

# purpose tags for derive_seed; values are arbitrary but frozen
TAG_INIT = 1
TAG_BATCH = 2
TAG_LATENT = 3
TAG_GUMBEL = 4
TAG_INTERP = 5
TAG_EVAL = 6
TAG_DATA = 7
TAG_TRIAL = 8


def derive_seed(*parts: int) -> int:
    """Collapse a tuple of integers into a single stable 63-bit seed."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def torch_generator(seed: int, device: str | torch.device = "cpu") -> torch.Generator:
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed))
    return gen


def check_finite(name: str, value: float | torch.Tensor) -> None:
    """Raise FloatingPointError if a loss or metric went non-finite."""
    if isinstance(value, torch.Tensor):
        value = value.detach()
    v = float(value)
    if not np.isfinite(v):
        raise FloatingPointError(f"{name} is not finite: {v}")


def images_to_tensor(images) -> torch.Tensor:
    """Accept (N,H,W,3) numpy in [0,1] or (N,3,H,W) torch; return (N,3,H,W) float32."""
    if isinstance(images, torch.Tensor):
        t = images.float()
        if t.ndim != 4 or t.shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) tensor, got {tuple(t.shape)}")
        return t
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N,H,W,3) array, got {arr.shape}")
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
