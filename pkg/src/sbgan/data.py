"""Procedural toy scene dataset with a known layout distribution.

Scenes are built from ordered region rules painted over a background class:
a horizon band and one axis-aligned rectangle per object class. Because the
rule distribution is explicit, class frequencies and region sizes of the
generated corpus can be checked against independent Monte-Carlo estimates.

Layout sampling semantics (the contract tests re-derive statistics from):
  * the map starts as all background (class 0);
  * a ``HorizonRule`` draws u ~ U(low, high) and paints rows
    ``floor(u * H) .. H-1`` with its class;
  * a ``RectRule`` draws, ``count`` times, a width ``max(1, round(uw * W))``
    with uw ~ U(*width), a height likewise from ``height``, then a top-left
    corner uniform over all placements that keep the rectangle inside the
    map, and paints it;
  * rules are applied in order, later rules overwrite earlier ones.

Images are rendered by painting each class's reference color and adding
per-pixel uniform noise of amplitude ``spec.noise`` (clipped to [0, 1]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# reference palette; entries are pairwise >= 0.2 apart in max-channel distance
DEFAULT_COLORS = (
    (0.30, 0.50, 0.85),  # background / sky
    (0.25, 0.65, 0.25),  # ground
    (0.85, 0.25, 0.25),
    (0.90, 0.80, 0.20),
    (0.55, 0.30, 0.75),
    (0.15, 0.80, 0.80),
    (0.90, 0.55, 0.15),
    (0.80, 0.45, 0.75),
)

COLOR_SEPARATION = 0.2  # required min pairwise max-channel distance


@dataclass(frozen=True)
class HorizonRule:
    """Paints all rows below a horizon line drawn uniformly in a band."""

    cls: int
    low: float = 0.45
    high: float = 0.65


@dataclass(frozen=True)
class RectRule:
    """Paints ``count`` random rectangles of one class."""

    cls: int
    count: int = 1
    width: tuple[float, float] = (0.25, 0.45)
    height: tuple[float, float] = (0.25, 0.45)


@dataclass(frozen=True)
class ToyWorldSpec:
    num_classes: int
    resolution: tuple[int, int]  # (H, W)
    class_colors: tuple[tuple[float, float, float], ...]
    rules: tuple = ()
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        k = self.num_classes
        if k < 2:
            raise ValueError(f"need at least 2 classes, got {k}")
        if len(self.class_colors) != k:
            raise ValueError(f"expected {k} class colors, got {len(self.class_colors)}")
        colors = np.asarray(self.class_colors, dtype=np.float64)
        if colors.min() < 0.0 or colors.max() > 1.0:
            raise ValueError("class colors must lie in [0, 1]")
        for i in range(k):
            for j in range(i + 1, k):
                if np.abs(colors[i] - colors[j]).max() < COLOR_SEPARATION:
                    raise ValueError(
                        f"class colors {i} and {j} are closer than {COLOR_SEPARATION}"
                    )
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ValueError(f"bad resolution {self.resolution}")
        if not 0.0 <= self.noise <= 0.05:
            raise ValueError(f"noise amplitude must be in [0, 0.05], got {self.noise}")
        for rule in self.rules:
            if not 0 < rule.cls < k:
                raise ValueError(f"rule class {rule.cls} outside (0, {k})")


def default_world(num_classes: int = 6, resolution: tuple[int, int] = (32, 64),
                  seed: int = 0, noise: float = 0.05) -> ToyWorldSpec:
    """Standard world: sky background, ground band, one rectangle per extra class."""
    if num_classes > len(DEFAULT_COLORS):
        raise ValueError(f"default palette supports up to {len(DEFAULT_COLORS)} classes")
    rules: list = []
    if num_classes >= 2:
        rules.append(HorizonRule(cls=1))
    for cls in range(2, num_classes):
        rules.append(RectRule(cls=cls))
    return ToyWorldSpec(
        num_classes=num_classes,
        resolution=tuple(resolution),
        class_colors=DEFAULT_COLORS[:num_classes],
        rules=tuple(rules),
        noise=noise,
        seed=seed,
    )


@dataclass
class SceneSample:
    image: np.ndarray   # (H, W, 3) float32 in [0, 1]
    segmap: np.ndarray  # (H, W) int64 in [0, K)


@dataclass
class Dataset:
    samples: list[SceneSample]
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def segmaps(self) -> np.ndarray:
        return np.stack([s.segmap for s in self.samples])


def _sample_layout(spec: ToyWorldSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.resolution
    labels = np.zeros((h, w), dtype=np.int64)
    for rule in spec.rules:
        if isinstance(rule, HorizonRule):
            row = int(rng.uniform(rule.low, rule.high) * h)
            labels[row:, :] = rule.cls
        elif isinstance(rule, RectRule):
            for _ in range(rule.count):
                rw = max(1, int(round(rng.uniform(*rule.width) * w)))
                rh = max(1, int(round(rng.uniform(*rule.height) * h)))
                top = int(rng.integers(0, h - rh + 1))
                left = int(rng.integers(0, w - rw + 1))
                labels[top:top + rh, left:left + rw] = rule.cls
        else:
            raise ValueError(f"unknown rule type {type(rule).__name__}")
    return labels


def _render(spec: ToyWorldSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    colors = np.asarray(spec.class_colors, dtype=np.float32)
    img = colors[labels]
    if spec.noise > 0:
        img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_dataset(spec: ToyWorldSpec, n: int, seed: int, split: str = "train") -> Dataset:
    """Draw n scenes; a pure function of (spec, n, seed).

    Sample i is drawn from its own child seed, so shorter draws are prefixes
    of longer ones.
    """
    spec.validate()
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for child in children:
        rng = np.random.default_rng(child)
        labels = _sample_layout(spec, rng)
        image = _render(spec, labels, rng)
        samples.append(SceneSample(image=image, segmap=labels))
    return Dataset(samples=samples, num_classes=spec.num_classes, split=split)


def one_hot(segmap: np.ndarray, num_classes: int) -> np.ndarray:
    """Labels (..., H, W) -> float32 one-hot (..., K, H, W)."""
    segmap = np.asarray(segmap)
    if segmap.min() < 0 or segmap.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    out = (segmap[..., None, :, :] == np.arange(num_classes)[:, None, None])
    return out.astype(np.float32)


def downsample_labels(segmap: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor subsampling: keep the top-left entry of each cell."""
    segmap = np.asarray(segmap)
    h, w = segmap.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {h}x{w}")
    return segmap[..., ::factor, ::factor].copy()


def class_histogram(maps, num_classes: int) -> np.ndarray:
    """Pooled class-frequency vector over a collection of label maps."""
    maps = [np.asarray(m) for m in maps]
    if len(maps) == 0:
        raise ValueError("empty collection of maps")
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in maps:
        counts += np.bincount(m.ravel(), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# palette rendering

def render_palette(segmap: np.ndarray, class_colors) -> np.ndarray:
    """Labels (H, W) -> uint8 RGB image using the class palette."""
    colors8 = np.round(np.asarray(class_colors, dtype=np.float64) * 255).astype(np.uint8)
    return colors8[np.asarray(segmap)]


def invert_palette(rgb: np.ndarray, class_colors) -> np.ndarray:
    """Exact inverse of render_palette; unknown colors raise ValueError."""
    colors8 = np.round(np.asarray(class_colors, dtype=np.float64) * 255).astype(np.uint8)
    rgb = np.asarray(rgb, dtype=np.uint8)
    match = (rgb[..., None, :] == colors8[None, None, :, :]).all(axis=-1)
    if not match.any(axis=-1).all():
        raise ValueError("image contains colors outside the class palette")
    return match.argmax(axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# disk layout: root/{train,val}/img/NNNNN.png, root/{train,val}/seg/NNNNN.png,
# root/meta.json

def save_dataset(root: str | Path, spec: ToyWorldSpec, datasets: dict[str, Dataset]) -> None:
    root = Path(root)
    for split, ds in datasets.items():
        img_dir = root / split / "img"
        seg_dir = root / split / "seg"
        img_dir.mkdir(parents=True, exist_ok=True)
        seg_dir.mkdir(parents=True, exist_ok=True)
        for i, sample in enumerate(ds.samples):
            img8 = np.round(sample.image * 255).astype(np.uint8)
            Image.fromarray(img8, mode="RGB").save(img_dir / f"{i:05d}.png")
            Image.fromarray(sample.segmap.astype(np.uint8), mode="L").save(seg_dir / f"{i:05d}.png")
    h, w = spec.resolution
    meta = {
        "num_classes": spec.num_classes,
        "height": h,
        "width": w,
        "class_colors": [list(c) for c in spec.class_colors],
        "seed": spec.seed,
        "splits": {split: len(ds) for split, ds in datasets.items()},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_meta(root: str | Path) -> dict:
    meta_path = Path(root) / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset meta at {meta_path}")
    return json.loads(meta_path.read_text())


def load_dataset(root: str | Path, split: str) -> Dataset:
    root = Path(root)
    meta = load_meta(root)
    img_dir = root / split / "img"
    seg_dir = root / split / "seg"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"dataset split directory missing: {img_dir}")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        seg_path = seg_dir / img_path.name
        image = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        segmap = np.asarray(Image.open(seg_path), dtype=np.int64)
        samples.append(SceneSample(image=image, segmap=segmap))
    if not samples:
        raise FileNotFoundError(f"no samples under {img_dir}")
    return Dataset(samples=samples, num_classes=meta["num_classes"], split=split)


def save_image_grid(images: np.ndarray, path: str | Path, ncol: int = 8) -> None:
    """Tile (N, H, W, 3) float images in [0, 1] into one PNG."""
    images = np.asarray(images)
    n, h, w, _ = images.shape
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    grid = np.ones((nrow * h, ncol * w, 3), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, ncol)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i]
    Image.fromarray(np.round(grid * 255).astype(np.uint8), mode="RGB").save(Path(path))
