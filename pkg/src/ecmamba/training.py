"""Losses, Adam with cosine annealing, and the joint training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .autodiff import ContractError, Tape, Tensor, backward, ops
from .network import ECMamba, ModelOutput

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PERCEPTUAL_SEED = 20240917


@dataclass(frozen=True)
class LossWeights:
    phi_ssim: float = 0.2
    phi_per: float = 0.01
    lam: float = 0.1          # L1(R_out, I_GT)
    lam_R: float = 0.1
    lam_L: float = 0.1

    def __post_init__(self):
        for name in ("phi_ssim", "phi_per", "lam", "lam_R", "lam_L"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                raise ContractError(f"LossWeights: {name} must be a finite value >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    batch: int = 4
    crop: int = 64
    iters: int = 5000
    seed: int = 0
    augment: bool = True
    log_every: int = 100

    def __post_init__(self):
        if not self.lr_init >= self.lr_final > 0:
            raise ContractError(f"TrainConfig: need lr_init >= lr_final > 0, got {self.lr_init}, {self.lr_final}")
        if self.batch < 1 or self.iters < 0:
            raise ContractError("TrainConfig: batch must be >= 1 and iters >= 0")
        if self.crop < 2 or self.crop % 2:
            raise ContractError(f"TrainConfig: crop {self.crop} must be even and >= 2")


# ---------------------------------------------------------------------------
# SSIM and perceptual terms

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x: Tensor, g1d: np.ndarray) -> Tensor:
    """Separable 'valid' Gaussian filter applied per channel."""
    C = x.shape[1]
    k = len(g1d)
    row = np.tile(g1d.reshape(1, 1, 1, k), (C, 1, 1, 1)).astype(x.dtype)
    col = np.tile(g1d.reshape(1, 1, k, 1), (C, 1, 1, 1)).astype(x.dtype)
    return ops.conv2d(ops.conv2d(x, row, groups=C), col, groups=C)


def ssim_tensor(x: Tensor, y: Tensor, data_range: float = 1.0) -> Tensor:
    """Mean local SSIM over valid windows, clamped to <= 1 (differentiable)."""
    if x.shape != y.shape:
        raise ContractError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape[2:]) < SSIM_WINDOW:
        raise ContractError(f"ssim: image {x.shape[2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    C = x.shape[1]
    stats = _blur(ops.concat([x, y, ops.mul(x, x), ops.mul(y, y), ops.mul(x, y)], axis=1), gaussian_window())
    mx, my = stats[:, :C], stats[:, C:2 * C]
    mxx, myy, mxy = stats[:, 2 * C:3 * C], stats[:, 3 * C:4 * C], stats[:, 4 * C:]
    mx2, my2, mxmy = ops.mul(mx, mx), ops.mul(my, my), ops.mul(mx, my)
    num = ops.mul(ops.add(ops.mul(mxmy, 2.0), c1), ops.add(ops.mul(ops.sub(mxy, mxmy), 2.0), c2))
    den = ops.mul(ops.add(ops.add(mx2, my2), c1), ops.add(ops.add(ops.sub(mxx, mx2), ops.sub(myy, my2)), c2))
    return ops.clamp_max(ops.mean(ops.div(num, den)), 1.0)


class FeatureExtractor:
    """Frozen random 3-layer strided conv stack standing in for a pretrained network."""

    def __init__(self, seed: int = PERCEPTUAL_SEED, widths=(3, 8, 16, 16), dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.weights = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            fan_in = c_in * 9
            # He-normal keeps feature magnitudes comparable across layers
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3))
            self.weights.append(w.astype(dtype))

    def __call__(self, x: Tensor) -> Tensor:
        for i, w in enumerate(self.weights):
            x = ops.conv2d(x, w.astype(x.dtype, copy=False), stride=2, padding=1)
            if i < len(self.weights) - 1:
                x = ops.relu(x)
        return x


_default_extractor: FeatureExtractor | None = None


def default_extractor() -> FeatureExtractor:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = FeatureExtractor()
    return _default_extractor


def l1(a, b) -> Tensor:
    return ops.mean(ops.abs(ops.sub(a, b)))


def primary_terms(I_out: Tensor, I_gt: Tensor, w: LossWeights,
                  extractor: FeatureExtractor | None = None) -> dict[str, Tensor]:
    if I_out.shape != I_gt.shape:
        raise ContractError(f"primary_loss: output {I_out.shape} and target {I_gt.shape} differ")
    phi = extractor or default_extractor()
    return {
        "l1": l1(I_out, I_gt),
        "ssim": ops.sub(1.0, ssim_tensor(I_out, I_gt)),
        "per": l1(phi(I_out), phi(I_gt)),
    }


def primary_loss(I_out: Tensor, I_gt: Tensor, w: LossWeights = LossWeights(),
                 extractor: FeatureExtractor | None = None) -> Tensor:
    """L1 + φ_ssim·(1 − SSIM) + φ_per·FeatureL1."""
    t = primary_terms(I_out, I_gt, w, extractor)
    return ops.add(ops.add(t["l1"], ops.mul(t["ssim"], w.phi_ssim)), ops.mul(t["per"], w.phi_per))


@dataclass
class Objective:
    total: Tensor
    terms: dict[str, float]


def total_objective(out: ModelOutput, I_gt: Tensor, w: LossWeights = LossWeights(),
                    extractor: FeatureExtractor | None = None) -> Objective:
    """Primary loss plus the two Retinex consistency constraints and the reflectance L1."""
    t = primary_terms(out.I_out, I_gt, w, extractor)
    primary = ops.add(ops.add(t["l1"], ops.mul(t["ssim"], w.phi_ssim)), ops.mul(t["per"], w.phi_per))
    cons_L = ops.mean(ops.abs(ops.sub(ops.mul(out.L_bar, out.L_out), 1.0)))
    cons_R = ops.mean(ops.abs(ops.sub(ops.mul(out.R_bar, out.R_out), 1.0)))
    refl = l1(out.R_out, I_gt)
    total = ops.add(primary, ops.add(ops.add(ops.mul(cons_L, w.lam_L), ops.mul(cons_R, w.lam_R)),
                                     ops.mul(refl, w.lam)))
    terms = {"total": total.item(), "l1": t["l1"].item(), "ssim": t["ssim"].item(), "per": t["per"].item(),
             "constraint_L": cons_L.item(), "constraint_R": cons_R.item(), "refl": refl.item()}
    return Objective(total, terms)


# ---------------------------------------------------------------------------
# optimisation

def cosine_lr(it: int, total: int, lr_init: float, lr_final: float) -> float:
    """Cosine annealing: lr_init at iteration 0, lr_final at iteration total - 1."""
    progress = min(max(it, 0), max(total - 1, 1)) / max(total - 1, 1)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * progress))


@dataclass
class Adam:
    params: list[Tensor]
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
            self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


class NonFiniteLoss(ContractError):
    pass


def first_nonfinite(tape: Tape) -> str | None:
    for i, rec in enumerate(tape.records):
        if not np.isfinite(rec.output.data).all():
            return f"record #{i} ({rec.op}, shape {rec.output.shape})"
    return None


def train_step(model: ECMamba, lq: np.ndarray, gt: np.ndarray, opt: Adam, lr: float,
               weights: LossWeights = LossWeights(), extractor: FeatureExtractor | None = None) -> dict[str, float]:
    """One joint Adam update of the estimator and both branches; returns the loss terms."""
    dtype = model.estimator.stem.weight.dtype
    image = Tensor(np.asarray(lq, dtype=dtype))
    target = Tensor(np.asarray(gt, dtype=dtype))
    model.zero_grad()
    with Tape() as tape:
        obj = total_objective(model(image), target, weights, extractor)
    if not math.isfinite(obj.terms["total"]):
        where = first_nonfinite(tape) or "the loss reduction"
        raise NonFiniteLoss(f"non-finite loss {obj.terms['total']}; first non-finite intermediate: {where}")
    backward(obj.total, tape)
    opt.step(lr)
    return obj.terms


LOG_FIELDS = ("iter", "lr", "total", "l1", "ssim", "per", "constraint_L", "constraint_R")


def format_log(it: int, lr: float, terms: dict[str, float]) -> str:
    vals = [f"{it}", f"{lr:.3e}"] + [f"{terms[k]:.6f}" for k in LOG_FIELDS[2:]]
    return ", ".join(vals)


@dataclass
class FitResult:
    history: list[dict[str, float]]
    seconds: float


def fit(model: ECMamba, batches: Iterable[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
        weights: LossWeights = LossWeights(), log_line: Callable[[str], None] | None = None) -> FitResult:
    """Train for ``cfg.iters`` steps drawing (lq, gt) batches from ``batches``."""
    opt = Adam(model.parameters())
    extractor = default_extractor()
    history = []
    start = time.perf_counter()
    it_batches = iter(batches)
    for it in range(cfg.iters):
        lq, gt = next(it_batches)
        lr = cosine_lr(it, cfg.iters, cfg.lr_init, cfg.lr_final)
        terms = train_step(model, lq, gt, opt, lr, weights, extractor)
        terms["iter"], terms["lr"] = it, lr
        history.append(terms)
        if log_line is not None and (it % cfg.log_every == 0 or it == cfg.iters - 1):
            log_line(format_log(it, lr, terms))
    return FitResult(history, time.perf_counter() - start)
