"""Clean-image sources and seeded degraded/clean pair generation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import zoom

from .autodiff import ContractError
from .retinex import SyntheticDegradation, synthesize_pair


def _value_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise in [0, 1], shape [size, size]."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.random((cells + 1, cells + 1))
        layer = zoom(grid, size / (cells + 1), order=3, mode="nearest")[:size, :size]
        out += amp * layer
        total += amp
        amp *= 0.5
    return np.clip(out / total, 0.0, 1.0)


def procedural_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth colour gradient + a few coloured shapes + value-noise texture, [3, size, size] in [0, 1]."""
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.05, 0.95, (2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    for _ in range(rng.integers(2, 6)):
        colour = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            mask = (ys - cy) ** 2 + (xs - cx) ** 2 < r ** 2
        else:
            mask = (np.abs(ys - cy) < r) & (np.abs(xs - cx) < rng.uniform(0.05, 0.3))
        alpha = rng.uniform(0.6, 1.0)
        img = np.where(mask[None], (1 - alpha) * img + alpha * colour[:, None, None], img)

    texture = _value_noise(rng, size) - 0.5
    img = img + rng.uniform(0.05, 0.2) * texture[None]
    return np.clip(img, 0.0, 1.0)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and rotation by a multiple of 90 degrees."""
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(np.rot90(img, k=int(rng.integers(0, 4)), axes=(1, 2)))


def random_crop(img: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    _, H, W = img.shape
    if H < crop or W < crop:
        raise ContractError(f"random_crop: image {H}x{W} smaller than crop {crop}")
    y = int(rng.integers(0, H - crop + 1))
    x = int(rng.integers(0, W - crop + 1))
    return img[:, y:y + crop, x:x + crop]


def load_gt_dir(root: str | Path) -> list[np.ndarray]:
    """Every PNG under ``<root>/gt`` as [3, H, W] float arrays."""
    from .io import read_png

    gt_dir = Path(root) / "gt"
    if not gt_dir.is_dir():
        raise ContractError(f"data root {root} has no gt/ directory")
    images = [read_png(p) for p in sorted(gt_dir.glob("*.png"))]
    if not images:
        raise ContractError(f"no PNG images found in {gt_dir}")
    return images


@dataclass(frozen=True)
class PairRecord:
    index: int
    source: str
    deg: SyntheticDegradation

    def manifest_line(self) -> str:
        d = self.deg
        return (f"{self.index}\t{self.source}\t{d.kind}\tgamma={d.gamma:.6f}\tgain={d.gain:.6f}"
                f"\tsigma={d.noise_sigma:.6f}\tseed={d.seed}")


class PairGenerator:
    """Seeded stream of (degraded, clean) training samples.

    Clean images come from ``images`` (random crops) or, if none are given,
    from the procedural generator. Every sample draws from its own generator
    seeded by (seed, index), so the stream is reproducible.
    """

    def __init__(self, seed: int, crop: int = 64, images: Sequence[np.ndarray] | None = None,
                 augment: bool = True, manifest: str | Path | None = None):
        self.seed = seed
        self.crop = crop
        self.images = list(images) if images else None
        self.augment = augment
        self.manifest = Path(manifest) if manifest else None
        self.index = 0
        if self.manifest is not None:
            self.manifest.write_text("index\tsource\tkind\tgamma\tgain\tsigma\tseed\n")

    def sample(self, index: int) -> tuple[np.ndarray, np.ndarray, PairRecord]:
        rng = np.random.default_rng([self.seed, index])
        if self.images:
            k = int(rng.integers(0, len(self.images)))
            clean, source = random_crop(self.images[k], self.crop, rng), f"image{k}"
        else:
            clean, source = procedural_image(rng, self.crop), "procedural"
        if self.augment:
            clean = augment(clean, rng)
        deg = SyntheticDegradation.sample(rng)
        lq, gt = synthesize_pair(clean, deg)
        return lq, gt, PairRecord(index, source, deg)

    def batch(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        lqs, gts, lines = [], [], []
        for _ in range(size):
            lq, gt, rec = self.sample(self.index)
            self.index += 1
            lqs.append(lq)
            gts.append(gt)
            lines.append(rec.manifest_line())
        if self.manifest is not None:
            with self.manifest.open("a") as fh:
                fh.write("\n".join(lines) + "\n")
        return np.stack(lqs), np.stack(gts)

    def batches(self, size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while True:
            yield self.batch(size)


def heldout_pairs(n: int, size: int = 64, seed: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """``n`` procedural evaluation pairs from a seed disjoint from training."""
    gen = PairGenerator(seed, size, augment=False)
    return gen.batch(n)
