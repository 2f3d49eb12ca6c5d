"""Orderings of an H×W token grid into a 1D sequence.

Grid index ``i`` is the raster (row-major) position ``y * W + x``. A
``ScanOrder.forward[s]`` is the grid index placed at sequence position ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .autodiff import ContractError, Tensor, ops, record
from .autodiff.ops import FAST, _corners
from .nn import Module, kaiming_uniform, parameter


@dataclass(frozen=True)
class ScanOrder:
    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward) -> "ScanOrder":
        forward = np.asarray(forward, dtype=np.intp)
        n = forward.size
        if forward.ndim != 1 or not np.array_equal(np.sort(forward), np.arange(n)):
            raise ContractError("ScanOrder: forward is not a permutation of 0..n-1")
        inverse = np.empty(n, dtype=np.intp)
        inverse[forward] = np.arange(n)
        return cls(forward, inverse)

    def __len__(self) -> int:
        return self.forward.size


@dataclass
class ActivationResponseMap:
    """Average sampling weight each token receives from the deformable kernel."""

    freq: np.ndarray            # [B, H, W], nonnegative
    positions_counted: int

    @property
    def counts(self) -> np.ndarray:
        return self.freq * self.positions_counted


def raster_order(H: int, W: int) -> ScanOrder:
    if H < 1 or W < 1:
        raise ContractError(f"raster_order: grid {H}x{W} must be at least 1x1")
    return ScanOrder.from_forward(np.arange(H * W))


def cross_scan_orders(H: int, W: int) -> list[ScanOrder]:
    """Row-major, column-major, and both reversed."""
    row = raster_order(H, W).forward
    col = np.arange(H * W).reshape(H, W).T.reshape(-1)
    return [ScanOrder.from_forward(o) for o in (row, col, row[::-1], col[::-1])]


def feature_aware_order(arm: ActivationResponseMap, b: int = 0) -> ScanOrder:
    """Tokens sorted by activation frequency, highest first; ties by raster index."""
    freq = np.asarray(arm.freq[b]).reshape(-1)
    return ScanOrder.from_forward(np.argsort(-freq, kind="stable"))


def _batched_index(orders: ScanOrder | Sequence[ScanOrder], batch: int, n: int, attr: str) -> np.ndarray:
    if isinstance(orders, ScanOrder):
        orders = [orders] * batch
    if len(orders) != batch:
        raise ContractError(f"scan order: got {len(orders)} orders for batch of {batch}")
    rows = []
    for o in orders:
        if len(o) != n:
            raise ContractError(f"scan order: permutation length {len(o)} != {n} tokens")
        rows.append(getattr(o, attr))
    return np.stack(rows)[:, :, None]


def apply_order(x: Tensor, orders: ScanOrder | Sequence[ScanOrder]) -> Tensor:
    """[B, C, H, W] -> [B, H·W, C] with tokens arranged by ``orders``."""
    B, C, H, W = x.shape
    tokens = ops.transpose(ops.reshape(x, (B, C, H * W)), (0, 2, 1))
    return ops.permute(tokens, _batched_index(orders, B, H * W, "forward"), axis=1)


def unapply_order(seq: Tensor, orders: ScanOrder | Sequence[ScanOrder], H: int, W: int) -> Tensor:
    """Inverse of :func:`apply_order`: [B, H·W, C] -> [B, C, H, W]."""
    B, L, C = seq.shape
    if L != H * W:
        raise ContractError(f"unapply_order: sequence length {L} != {H}x{W}")
    tokens = ops.permute(seq, _batched_index(orders, B, L, "inverse"), axis=1)
    return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (B, C, H, W))


# ---------------------------------------------------------------------------
# deformable aggregation

def kernel_grid(K: int) -> np.ndarray:
    """Offsets (dy, dx) of the regular K×K kernel, row-major, shape [K², 2]."""
    r = np.arange(K) - K // 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1).astype(np.float64)


def sampling_coords(offsets: np.ndarray, K: int) -> np.ndarray:
    """Absolute sample positions [B, K², H, W, 2] from offsets [B, 2K², H, W]."""
    B, _, H, W = offsets.shape
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    base = kernel_grid(K)
    off = offsets.reshape(B, K * K, 2, H, W)
    y = ys[None, None] + base[None, :, 0, None, None] + off[:, :, 0]
    x = xs[None, None] + base[None, :, 1, None, None] + off[:, :, 1]
    return np.stack([y, x], axis=-1)


def activation_response(coords: np.ndarray, weight: np.ndarray, H: int, W: int) -> ActivationResponseMap:
    """Credit each sample's bilinear weights × ``weight`` to its 4 neighbouring tokens.

    ``coords`` is [B, S, 2] in grid units, ``weight`` is [B, S]. Neighbours
    outside the grid receive nothing. The total is divided by the number of
    sliding positions (H·W).
    """
    B = coords.shape[0]
    y, x = coords[..., 0], coords[..., 1]
    y0, x0 = np.floor(y), np.floor(x)
    wy, wx = y - y0, x - x0
    y0, x0 = y0.astype(np.intp), x0.astype(np.intp)
    freq = np.zeros((B, H * W))
    rows = np.broadcast_to(np.arange(B)[:, None], y.shape)
    for dy, dx, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                      (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W) & (w > 0)
        flat = rows[ok] * (H * W) + yy[ok] * W + xx[ok]
        freq.reshape(-1)[:] += np.bincount(flat, weights=(w * weight)[ok], minlength=B * H * W)
    positions = H * W
    return ActivationResponseMap(freq.reshape(B, H, W) / positions, positions)


def _check_deform_args(x: Tensor, offsets: Tensor, modulation: Tensor, weight: Tensor, K: int,
                       count_mode: str) -> None:
    if K % 2 != 1:
        raise ContractError(f"deform_aggregate: kernel size {K} must be odd")
    B, C, H, W = x.shape
    KK = K * K
    if offsets.shape != (B, 2 * KK, H, W) or modulation.shape != (B, KK, H, W):
        raise ContractError(f"deform_aggregate: offsets {offsets.shape} / modulation "
                            f"{modulation.shape} do not match input {x.shape} with K={K}")
    if weight.shape != (C, KK):
        raise ContractError(f"deform_aggregate: weight {weight.shape}, expected {(C, KK)}")
    if count_mode not in ("modulated", "incidence"):
        raise ContractError(f"deform_aggregate: unknown count_mode {count_mode!r}")
    if not np.isfinite(offsets.data).all():
        raise ContractError("deform_aggregate: offsets must be finite")


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _deform_forward(xp, offsets, mod, weight, base, credit_mod):
    # xp is channels-last [B, Hp, Wp, C]; the output is [B, H, W, C]
    B, Hp, Wp, C = xp.shape
    H, W = Hp - 2, Wp - 2
    KK = mod.shape[1]
    out = np.zeros((B, H, W, C))
    freq = np.zeros((B, H, W))
    for b in range(B):
        for k in range(KK):
            for h in range(H):
                for w in range(W):
                    y = h + base[k, 0] + 1.0 + offsets[b, 2 * k, h, w]
                    x = w + base[k, 1] + 1.0 + offsets[b, 2 * k + 1, h, w]
                    y0, x0, y1, x1, wy, wx = _corners(y, x, Hp, Wp)
                    m = mod[b, k, h, w]
                    w00 = (1 - wy) * (1 - wx)
                    w01 = (1 - wy) * wx
                    w10 = wy * (1 - wx)
                    w11 = wy * wx
                    for c in range(C):
                        v = (w00 * xp[b, y0, x0, c] + w01 * xp[b, y0, x1, c]
                             + w10 * xp[b, y1, x0, c] + w11 * xp[b, y1, x1, c])
                        out[b, h, w, c] += weight[k, c] * m * v
                    cr = m if credit_mod else 1.0
                    # only tokens of the unpadded grid receive credit
                    if w00 > 0 and 1 <= y0 <= H and 1 <= x0 <= W:
                        freq[b, y0 - 1, x0 - 1] += w00 * cr
                    if w01 > 0 and 1 <= y0 <= H and 1 <= x1 <= W:
                        freq[b, y0 - 1, x1 - 1] += w01 * cr
                    if w10 > 0 and 1 <= y1 <= H and 1 <= x0 <= W:
                        freq[b, y1 - 1, x0 - 1] += w10 * cr
                    if w11 > 0 and 1 <= y1 <= H and 1 <= x1 <= W:
                        freq[b, y1 - 1, x1 - 1] += w11 * cr
    return out, freq


@numba.njit(cache=True, fastmath=FAST, error_model="numpy")
def _deform_backward(xp, offsets, mod, weight, base, g):
    # channels-last like the forward: xp [B, Hp, Wp, C], g [B, H, W, C], weight [K², C]
    B, Hp, Wp, C = xp.shape
    H, W = Hp - 2, Wp - 2
    KK = mod.shape[1]
    gxp = np.zeros(xp.shape)
    goff = np.zeros(offsets.shape)
    gmod = np.zeros(mod.shape)
    gw = np.zeros(weight.shape)
    a = np.empty(C)
    for b in range(B):
        for k in range(KK):
            gwk = np.zeros(C)
            wk = weight[k]
            for h in range(H):
                for w in range(W):
                    y = h + base[k, 0] + 1.0 + offsets[b, 2 * k, h, w]
                    x = w + base[k, 1] + 1.0 + offsets[b, 2 * k + 1, h, w]
                    y0, x0, y1, x1, wy, wx = _corners(y, x, Hp, Wp)
                    m = mod[b, k, h, w]
                    w00 = (1 - wy) * (1 - wx)
                    w01 = (1 - wy) * wx
                    w10 = wy * (1 - wx)
                    w11 = wy * wx
                    gy = 0.0
                    gx = 0.0
                    gm = 0.0
                    for c in range(C):
                        v00 = xp[b, y0, x0, c]
                        v01 = xp[b, y0, x1, c]
                        v10 = xp[b, y1, x0, c]
                        v11 = xp[b, y1, x1, c]
                        v = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
                        gv = g[b, h, w, c]
                        gm += gv * wk[c] * v
                        gwk[c] += gv * m * v
                        ac = gv * wk[c] * m
                        a[c] = ac
                        gy += ac * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
                        gx += ac * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
                    # corners may coincide, so each scatter is its own pass
                    for c in range(C):
                        gxp[b, y0, x0, c] += a[c] * w00
                    for c in range(C):
                        gxp[b, y0, x1, c] += a[c] * w01
                    for c in range(C):
                        gxp[b, y1, x0, c] += a[c] * w10
                    for c in range(C):
                        gxp[b, y1, x1, c] += a[c] * w11
                    gmod[b, k, h, w] = gm
                    # clamped components get no gradient
                    if 0.0 <= y <= Hp - 1.0:
                        goff[b, 2 * k, h, w] = gy
                    if 0.0 <= x <= Wp - 1.0:
                        goff[b, 2 * k + 1, h, w] = gx
            for c in range(C):
                gw[k, c] += gwk[c]
    return gxp, goff, gmod, gw


def modulated_deform_aggregate(x: Tensor, offsets: Tensor, modulation: Tensor, weight: Tensor,
                               kernel_size: int, bias: Tensor | None = None,
                               count_mode: str = "modulated") -> tuple[Tensor, ActivationResponseMap]:
    """Depthwise modulated deformable K×K aggregation with zero padding.

    x [B, C, H, W]; offsets [B, 2K², H, W] as (dy, dx) pairs per kernel tap;
    modulation [B, K², H, W]; weight [C, K²]. Returns the aggregated map and
    the activation response map of the sampling pattern. ``count_mode`` is
    ``"modulated"`` (bilinear weight × modulation) or ``"incidence"``
    (bilinear weight only). Samples beyond the one-token zero ring are
    clamped onto it and read zeros.
    """
    x, offsets, modulation, weight = (ops.as_tensor(t) for t in (x, offsets, modulation, weight))
    _check_deform_args(x, offsets, modulation, weight, kernel_size, count_mode)
    B, C, H, W = x.shape
    # the kernels run channels-last so the inner channel loop is contiguous;
    # inputs keep their dtype and the kernels accumulate in float64
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    off = np.ascontiguousarray(offsets.data)
    mod = np.ascontiguousarray(modulation.data)
    wt = np.ascontiguousarray(weight.data.T, dtype=np.float64)
    base = kernel_grid(kernel_size)
    out, freq = _deform_forward(xp, off, mod, wt, base, count_mode == "modulated")

    def adjoint(g):
        g_cl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gxp, goff, gmod, gw = _deform_backward(xp, off, mod, wt, base, g_cl)
        return (gxp[:, 1:-1, 1:-1].transpose(0, 3, 1, 2).astype(x.dtype), goff.astype(offsets.dtype),
                gmod.astype(modulation.dtype), gw.T.astype(weight.dtype))

    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=x.dtype)
    result = record("deform_aggregate", out, (x, offsets, modulation, weight), adjoint)
    if bias is not None:
        result = ops.add(result, ops.reshape(bias, (1, C, 1, 1)))
    return result, ActivationResponseMap(freq / (H * W), H * W)


def composed_deform_aggregate(x: Tensor, offsets: Tensor, modulation: Tensor, weight: Tensor,
                               kernel_size: int, bias: Tensor | None = None,
                               count_mode: str = "modulated") -> tuple[Tensor, ActivationResponseMap]:
    """Reference implementation of :func:`modulated_deform_aggregate`.

    Built only from differentiable primitives (pad, bilinear sampling,
    products and sums), so its gradients come from the generic tape.
    """
    K = kernel_size
    _check_deform_args(x, offsets, modulation, weight, K, count_mode)
    B, C, H, W = x.shape
    KK = K * K
    base = sampling_coords(np.zeros((1, 2 * KK, H, W)), K)[0]            # [KK, H, W, 2]
    # off[b, k, h, w, (dy, dx)]
    off = ops.transpose(ops.reshape(offsets, (B, KK, 2, H, W)), (0, 1, 3, 4, 2))
    # +1: sampling happens in the map padded by a one-token zero ring
    coords = ops.add(off, (base + 1.0).astype(x.dtype)[None])
    coords = ops.reshape(coords, (B, KK * H * W, 2))
    padded = ops.pad2d(x, 1)
    samples = ops.bilinear_sample(padded, coords)                          # [B, C, KK·H·W]
    samples = ops.reshape(samples, (B, C, KK, H * W))
    mod = ops.reshape(modulation, (B, 1, KK, H * W))
    taps = ops.reshape(weight, (1, C, KK, 1))
    out = ops.sum(ops.mul(ops.mul(samples, mod), taps), axis=2)
    out = ops.reshape(out, (B, C, H, W))
    if bias is not None:
        out = ops.add(out, ops.reshape(bias, (1, C, 1, 1)))

    raw = coords.data.reshape(B, KK * H * W, 2).astype(np.float64) - 1.0
    credit = (modulation.data.reshape(B, KK * H * W).astype(np.float64)
              if count_mode == "modulated" else np.ones((B, KK * H * W)))
    # points beyond the padding ring are clamped by the sampler and read zeros
    raw = np.clip(raw, -1.0, np.array([H, W], dtype=np.float64))
    arm = activation_response(raw, credit, H, W)
    return out, arm


class DeformAggregation(Module):
    """Offset and modulation predictors plus per-channel K² tap weights.

    Offset/modulation convolutions start at zero, so the initial sampling
    pattern is the regular grid with modulation 0.5.
    """

    def __init__(self, dim: int, rng: np.random.Generator, kernel_size: int = 3, dtype=np.float32,
                 count_mode: str = "modulated"):
        K = kernel_size
        self.kernel_size = K
        self.count_mode = count_mode
        self.offset_weight = parameter(np.zeros((2 * K * K, dim, K, K)), dtype)
        self.offset_bias = parameter(np.zeros(2 * K * K), dtype)
        self.mod_weight = parameter(np.zeros((K * K, dim, K, K)), dtype)
        self.mod_bias = parameter(np.zeros(K * K), dtype)
        self.weight = kaiming_uniform(rng, (dim, K * K), K * K, dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, ActivationResponseMap]:
        pad = self.kernel_size // 2
        n_off = self.offset_weight.shape[0]
        # both predictors read the same windows: run them as one convolution
        weight = ops.concat([self.offset_weight, self.mod_weight], axis=0)
        bias = ops.concat([self.offset_bias, self.mod_bias], axis=0)
        pred = ops.conv2d(x, weight, bias, padding=pad)
        offsets = pred[:, :n_off]
        modulation = ops.sigmoid(pred[:, n_off:])
        return modulated_deform_aggregate(x, offsets, modulation, self.weight, self.kernel_size,
                                          count_mode=self.count_mode)
