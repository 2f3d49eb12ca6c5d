"""The two-branch exposure-correction network.

Estimator -> intermediaries (R', L') -> two U-Net branches of RetinexMamba
blocks predicting residuals -> I_out = R_out ⊙ L_out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor, ops
from .nn import ChannelLayerNorm, Conv2d, ConvTranspose2d, Module, parameter
from .retinex import RetinexEstimator, build_intermediaries, compose_output
from .scan2d import (ActivationResponseMap, DeformAggregation, apply_order, cross_scan_orders,
                     feature_aware_order, raster_order, unapply_order)
from .ssm import SelectiveSSM

SCAN_STRATEGIES = ("fa", "raster", "cross")


@dataclass(frozen=True)
class ModelConfig:
    base_dim: int = 8
    state_dim: int = 8
    guide_dim: int | None = None        # defaults to base_dim
    eff_expand: int = 2
    kernel_size: int = 3
    scan_strategy: str = "fa"
    arm_mode: str = "modulated"
    scan_method: str = "recurrent"

    def __post_init__(self):
        if self.base_dim < 1 or self.state_dim < 1:
            raise ContractError("ModelConfig: base_dim and state_dim must be >= 1")
        if self.scan_strategy not in SCAN_STRATEGIES:
            raise ContractError(f"ModelConfig: scan_strategy must be one of {SCAN_STRATEGIES}")
        if self.kernel_size % 2 != 1:
            raise ContractError("ModelConfig: kernel_size must be odd")

    @property
    def guide(self) -> int:
        return self.guide_dim or self.base_dim


@dataclass(frozen=True)
class RmbConfig:
    dim: int
    guide_dim: int
    state_dim: int = 8
    kernel_size: int = 3
    eff_expand: int = 2
    scan_strategy: str = "fa"
    arm_mode: str = "modulated"
    scan_method: str = "recurrent"

    @classmethod
    def from_model(cls, cfg: ModelConfig, dim: int) -> "RmbConfig":
        return cls(dim, cfg.guide, cfg.state_dim, cfg.kernel_size, cfg.eff_expand,
                   cfg.scan_strategy, cfg.arm_mode, cfg.scan_method)


class RetinexSS2D(Module):
    def __init__(self, cfg: RmbConfig, rng: np.random.Generator, dtype=np.float32):
        dim = cfg.dim
        self.cfg = cfg
        self.in_proj = Conv2d(dim, dim, 1, rng, dtype=dtype)
        self.dwconv = Conv2d(dim, dim, 3, rng, padding=1, groups=dim, dtype=dtype)
        self.guide_proj = Conv2d(cfg.guide_dim, dim, 1, rng, dtype=dtype)
        self.deform = DeformAggregation(dim, rng, cfg.kernel_size, dtype, cfg.arm_mode)
        n_scans = 4 if cfg.scan_strategy == "cross" else 1
        self.ssms = [SelectiveSSM(dim, cfg.state_dim, rng, dtype, cfg.scan_method) for _ in range(n_scans)]
        self.gate_proj = Conv2d(dim, dim, 1, rng, dtype=dtype)
        self.out_proj = Conv2d(dim, dim, 1, rng, dtype=dtype)

    def forward(self, F_in: Tensor, F_c: Tensor, trace: list | None = None) -> Tensor:
        return retinex_ss2d(F_in, F_c, self, trace)


def retinex_ss2d(F_in: Tensor, F_c: Tensor, layer: RetinexSS2D, trace: list | None = None) -> Tensor:
    if F_in.shape[0] != F_c.shape[0] or F_in.shape[2:] != F_c.shape[2:]:
        raise ContractError(f"retinex_ss2d: feature {F_in.shape} and guidance {F_c.shape} differ spatially")
    B, C, H, W = F_in.shape
    fused = ops.mul(layer.dwconv(layer.in_proj(F_in)), layer.guide_proj(F_c))
    F_f = ops.silu(fused)
    F_d, arm = layer.deform(F_f)
    strategy = layer.cfg.scan_strategy
    if strategy == "fa":
        orders = [[feature_aware_order(arm, b) for b in range(B)]]
    elif strategy == "raster":
        orders = [raster_order(H, W)]
    else:
        orders = cross_scan_orders(H, W)
    restored = None
    for ssm, order in zip(layer.ssms, orders):
        y = unapply_order(ssm(apply_order(F_d, order)), order, H, W)
        restored = y if restored is None else ops.add(restored, y)
    if len(orders) > 1:
        restored = ops.mul(restored, 1.0 / len(orders))
    if trace is not None:
        trace.append(arm)
    gate = ops.silu(layer.gate_proj(F_in))
    return layer.out_proj(ops.mul(restored, gate))


class EFF(Module):
    """Pointwise conv -> GELU -> pointwise conv."""

    def __init__(self, dim: int, expand: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Conv2d(dim, dim * expand, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(dim * expand, dim, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class RetinexMambaBlock(Module):
    def __init__(self, cfg: RmbConfig, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = ChannelLayerNorm(cfg.dim, dtype)
        self.ss2d = RetinexSS2D(cfg, rng, dtype)
        self.norm2 = ChannelLayerNorm(cfg.dim, dtype)
        self.eff = EFF(cfg.dim, cfg.eff_expand, rng, dtype)

    def forward(self, F_in: Tensor, F_c: Tensor, trace: list | None = None) -> Tensor:
        return rmb_forward(F_in, F_c, self, trace)


def rmb_forward(F_in: Tensor, F_c: Tensor, block: RetinexMambaBlock, trace: list | None = None) -> Tensor:
    mid = ops.add(F_in, block.ss2d(block.norm1(F_in), F_c, trace))
    return ops.add(mid, block.eff(block.norm2(mid)))


class ECMM(Module):
    """Two-scale U-Net of RetinexMamba blocks with sigmoid mix-up skip fusion."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.base_dim
        self.conv_in = Conv2d(3, c, 3, rng, padding=1, dtype=dtype)
        self.enc = RetinexMambaBlock(RmbConfig.from_model(cfg, c), rng, dtype)
        self.down = Conv2d(c, 2 * c, 4, rng, stride=2, padding=1, dtype=dtype)
        self.mid = RetinexMambaBlock(RmbConfig.from_model(cfg, 2 * c), rng, dtype)
        self.up = ConvTranspose2d(2 * c, c, 2, rng, stride=2, dtype=dtype)
        self.theta = parameter(np.zeros(1), dtype)
        self.dec = RetinexMambaBlock(RmbConfig.from_model(cfg, c), rng, dtype)
        self.conv_out = Conv2d(c, 3, 3, rng, padding=1, dtype=dtype)

    def forward(self, X: Tensor, F_c: Tensor, trace: list | None = None) -> Tensor:
        return ecmm_forward(X, F_c, self, trace)


def mixup(F_0: Tensor, F_0_up: Tensor, theta: Tensor) -> Tensor:
    w = ops.sigmoid(theta)
    return ops.add(ops.mul(F_0, w), ops.mul(F_0_up, ops.sub(1.0, w)))


def ecmm_forward(X: Tensor, F_c: Tensor, net: ECMM, trace: list | None = None) -> Tensor:
    if X.ndim != 4 or X.shape[1] != 3:
        raise ContractError(f"ecmm: expected [B, 3, H, W] input, got {X.shape}")
    H, W = X.shape[2:]
    if H % 2 or W % 2:
        raise ContractError(f"ecmm: spatial size {H}x{W} must be even; pad the input to even size first")
    F_0 = net.enc(net.conv_in(X), F_c, trace)
    F_1 = net.mid(net.down(F_0), ops.avg_pool2d(F_c, 2), trace)
    F_a = mixup(F_0, net.up(F_1), net.theta)
    return net.conv_out(net.dec(F_a, F_c, trace))


@dataclass
class ModelOutput:
    I_out: Tensor
    R_out: Tensor
    L_out: Tensor
    R_prime: Tensor
    L_prime: Tensor
    R_bar: Tensor
    L_bar: Tensor
    F_c: Tensor
    arms: list[ActivationResponseMap] | None = None


class ECMamba(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.estimator = RetinexEstimator(cfg.guide, rng, dtype=dtype)
        self.branch_r = ECMM(cfg, rng, dtype)
        self.branch_l = ECMM(cfg, rng, dtype)

    def forward(self, image: Tensor, keep_arms: bool = False) -> ModelOutput:
        return model_forward(image, self, keep_arms)


def model_forward(image: Tensor, model: ECMamba, keep_arms: bool = False) -> ModelOutput:
    triple = model.estimator(image)
    pair = build_intermediaries(image, triple)
    trace: list | None = [] if keep_arms else None
    R_out = ops.add(pair.R_prime, model.branch_r(pair.R_prime, triple.F_c, trace))
    L_out = ops.add(pair.L_prime, model.branch_l(pair.L_prime, triple.F_c, trace))
    return ModelOutput(compose_output(R_out, L_out), R_out, L_out, pair.R_prime, pair.L_prime,
                       triple.R_bar, triple.L_bar, triple.F_c, trace)
