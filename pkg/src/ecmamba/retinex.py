"""Retinex estimator, intermediary spaces, and the synthetic exposure degradation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor, ops
from .nn import Conv2d, Module, parameter

POSITIVE_EPS = 1e-4


@dataclass
class RetinexTriple:
    R_bar: Tensor   # [B, 3, H, W], > 0
    L_bar: Tensor   # [B, 3, H, W], > 0
    F_c: Tensor     # [B, C_f, H, W]


@dataclass
class IntermediaryPair:
    R_prime: Tensor
    L_prime: Tensor


class RetinexEstimator(Module):
    """1×1 conv -> 5×5 depthwise conv -> three parallel 1×1 heads.

    The input image is concatenated with its channel mean (4 channels in).
    R̄ and L̄ go through softplus + ε so they stay strictly positive.
    """

    def __init__(self, guide_dim: int, rng: np.random.Generator, hidden_dim: int | None = None,
                 dtype=np.float32):
        hidden = hidden_dim or guide_dim
        self.stem = Conv2d(4, hidden, 1, rng, dtype=dtype)
        self.depthwise = Conv2d(hidden, hidden, 5, rng, padding=2, groups=hidden, dtype=dtype)
        self.head_r = Conv2d(hidden, 3, 1, rng, dtype=dtype)
        self.head_l = Conv2d(hidden, 3, 1, rng, dtype=dtype)
        self.head_f = Conv2d(hidden, guide_dim, 1, rng, dtype=dtype)
        # softplus(b) = 1 so R̄ = L̄ ≈ 1 before training
        one = math.log(math.e - 1.0)
        self.head_r.bias = parameter(np.full(3, one), dtype)
        self.head_l.bias = parameter(np.full(3, one), dtype)

    def forward(self, image: Tensor) -> RetinexTriple:
        return estimator_forward(image, self)


def estimator_forward(image: Tensor, est: RetinexEstimator) -> RetinexTriple:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ContractError(f"estimator: expected [B, 3, H, W] image, got {image.shape}")
    mean_map = ops.mean(image, axis=1, keepdims=True)
    feat = est.depthwise(est.stem(ops.concat([image, mean_map], axis=1)))
    R_bar = ops.add(ops.softplus(est.head_r(feat)), POSITIVE_EPS)
    L_bar = ops.add(ops.softplus(est.head_l(feat)), POSITIVE_EPS)
    return RetinexTriple(R_bar, L_bar, est.head_f(feat))


def build_intermediaries(image: Tensor, triple: RetinexTriple) -> IntermediaryPair:
    """R' = I ⊙ L̄ and L' = I ⊙ R̄."""
    if image.shape != triple.L_bar.shape or image.shape != triple.R_bar.shape:
        raise ContractError(f"intermediaries: image {image.shape} vs maps {triple.L_bar.shape}")
    return IntermediaryPair(ops.mul(image, triple.L_bar), ops.mul(image, triple.R_bar))


def compose_output(R_out: Tensor, L_out: Tensor) -> Tensor:
    if R_out.shape != L_out.shape:
        raise ContractError(f"compose_output: shapes {R_out.shape} and {L_out.shape} differ")
    return ops.mul(R_out, L_out)


# ---------------------------------------------------------------------------
# synthetic degradation

GAMMA_RANGE = (0.4, 2.5)
GAIN_RANGE = (0.3, 1.8)
NOISE_RANGE = (0.0, 0.05)


@dataclass(frozen=True)
class SyntheticDegradation:
    """I_LQ = clip(gain · I_GT^gamma + n, 0, 1), n ~ Normal(0, noise_sigma²)."""

    gamma: float
    gain: float
    noise_sigma: float
    seed: int

    def __post_init__(self):
        for name, value, (lo, hi) in (("gamma", self.gamma, GAMMA_RANGE), ("gain", self.gain, GAIN_RANGE),
                                      ("noise_sigma", self.noise_sigma, NOISE_RANGE)):
            if not lo <= value <= hi:
                raise ContractError(f"SyntheticDegradation: {name}={value} outside [{lo}, {hi}]")

    @property
    def kind(self) -> str:
        if self.gamma > 1 and self.gain <= 1:
            return "under"
        if self.gamma < 1 and self.gain >= 1:
            return "over"
        return "mixed"

    @classmethod
    def sample(cls, rng: np.random.Generator, seed: int | None = None) -> "SyntheticDegradation":
        """Draw an under- or over-exposure setting with equal probability."""
        if rng.random() < 0.5:
            gamma = rng.uniform(1.2, GAMMA_RANGE[1])
            gain = rng.uniform(GAIN_RANGE[0], 0.9)
        else:
            gamma = rng.uniform(GAMMA_RANGE[0], 0.8)
            gain = rng.uniform(1.1, GAIN_RANGE[1])
        sigma = rng.uniform(*NOISE_RANGE)
        if seed is None:
            seed = int(rng.integers(0, 2**31 - 1))
        return cls(float(gamma), float(gain), float(sigma), seed)


def synthesize_pair(clean: np.ndarray, deg: SyntheticDegradation) -> tuple[np.ndarray, np.ndarray]:
    """Return (degraded, clean) for a clean image in [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.size and (clean.min() < 0.0 or clean.max() > 1.0):
        raise ContractError("synthesize_pair: clean image must lie in [0, 1]")
    out = deg.gain * np.power(clean, deg.gamma)
    if deg.noise_sigma > 0:
        out = out + np.random.default_rng(deg.seed).normal(0.0, deg.noise_sigma, size=clean.shape)
    return np.clip(out, 0.0, 1.0), clean
