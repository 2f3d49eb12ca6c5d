"""Wall-clock timing of the two selective-scan kernels across sequence lengths."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .ssm import SelectiveParams, parallel_scan, recurrent_scan

KERNELS = {"recurrent": recurrent_scan, "parallel": parallel_scan}


@dataclass(frozen=True)
class BenchRow:
    kernel: str
    length: int
    seconds: float
    ns_per_token: float
    ratio: float | None      # time relative to the previous length of the same kernel


def random_selective(rng: np.random.Generator, length: int, dim: int, state: int,
                     batch: int = 1) -> tuple[SelectiveParams, np.ndarray]:
    params = SelectiveParams(
        A=-rng.uniform(0.5, 2.0, (dim, state)),
        B=rng.standard_normal((batch, length, state)),
        C=rng.standard_normal((batch, length, state)),
        delta=rng.uniform(1e-3, 0.1, (batch, length, dim)),
    )
    return params, rng.standard_normal((batch, length, dim))


def time_kernel(fn, params: SelectiveParams, x: np.ndarray, repeats: int) -> float:
    """Minimum over ``repeats`` runs; the minimum is the least noisy estimate on a shared machine."""
    fn(params, x)  # warm-up (compilation, caches)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(params, x)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scan(lengths: Sequence[int], dim: int = 8, state: int = 16, repeats: int = 5,
               seed: int = 0, kernels: Sequence[str] = tuple(KERNELS)) -> list[BenchRow]:
    if not lengths or min(lengths) < 1:
        raise ContractError("bench_scan: lengths must be >= 1")
    if dim < 1 or state < 1 or repeats < 1:
        raise ContractError("bench_scan: dim, state and repeats must be >= 1")
    rng = np.random.default_rng(seed)
    inputs = {L: random_selective(rng, L, dim, state) for L in lengths}
    rows = []
    for name in kernels:
        prev = None
        for L in lengths:
            sec = time_kernel(KERNELS[name], *inputs[L], repeats)
            rows.append(BenchRow(name, L, sec, sec / L * 1e9, None if prev is None else sec / prev))
            prev = sec
    return rows


def format_table(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'kernel':<10} {'L':>8} {'wall_ns':>14} {'ns/token':>10} {'ratio':>7}"]
    for r in rows:
        ratio = "-" if r.ratio is None else f"{r.ratio:.3f}"
        lines.append(f"{r.kernel:<10} {r.length:>8} {r.seconds * 1e9:>14.0f} {r.ns_per_token:>10.1f} {ratio:>7}")
    return "\n".join(lines)
