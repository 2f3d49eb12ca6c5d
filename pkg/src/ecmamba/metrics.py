"""PSNR and SSIM on RGB images in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ContractError
from .training import SSIM_K1, SSIM_K2, SSIM_WINDOW, gaussian_window

PSNR_CAP = 100.0


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """10·log10(range² / MSE), capped at 100 dB for (near-)identical images."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP))


def psnr_batch(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-image PSNR over the leading axis."""
    if np.shape(x) != np.shape(y):
        raise ContractError(f"psnr: shapes {np.shape(x)} and {np.shape(y)} differ")
    return np.array([psnr(a, b) for a, b in zip(x, y)])


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid correlation over the last two axes
    k = len(g)
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM (11×11 Gaussian window, σ = 1.5) over channels and valid positions.

    Images are [C, H, W] or [H, W]; the result is clamped to at most 1.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim < 2 or min(x.shape[-2:]) < SSIM_WINDOW:
        raise ContractError(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(min(smap.mean(), 1.0))


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, name: str, output: np.ndarray, target: np.ndarray) -> None:
        self.names.append(name)
        self.psnr_db.append(psnr(output, target))
        self.ssim.append(ssim(output, target))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def table(self) -> str:
        width = max([len("image"), len("mean")] + [len(n) for n in self.names])
        lines = [f"{'image':<{width}}  {'psnr_db':>9}  {'ssim':>8}"]
        for n, p, s in zip(self.names, self.psnr_db, self.ssim):
            lines.append(f"{n:<{width}}  {p:9.4f}  {s:8.5f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:9.4f}  {self.mean_ssim:8.5f}")
        return "\n".join(lines)
