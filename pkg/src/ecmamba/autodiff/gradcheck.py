"""Central finite-difference checks for tape adjoints."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``target.data``.

    When ``indices`` is given only those flat entries are probed; the rest
    of the returned array is NaN.
    """
    flat = target.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(target.shape)


def analytic_grads(fn: Callable[[], Tensor], targets: Sequence[Tensor]) -> list[np.ndarray]:
    for t in targets:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in targets]


def gradcheck(fn: Callable[[], Tensor], targets: Sequence[Tensor], step: float = 1e-5,
              max_probes: int | None = 64, seed: int = 0) -> float:
    """Return the max relative error between analytic and numeric gradients.

    The relative error is ``|a - n| / max(|a|, |n|, scale)`` per entry, where
    ``scale`` is the largest numeric gradient magnitude over all targets
    times 1e-3 (so entries that should be zero do not divide by zero).
    At most ``max_probes`` entries per target are probed, chosen at random.
    """
    rng = np.random.default_rng(seed)
    analytic = analytic_grads(fn, targets)
    numerics, probes = [], []
    for t in targets:
        n = t.size
        if max_probes is None or n <= max_probes:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_probes, replace=False))
        probes.append(idx)
        numerics.append(numeric_grad(fn, t, step, idx).reshape(-1)[idx])
    scale = max((np.abs(v).max() if v.size else 0.0) for v in numerics)
    floor = max(scale * 1e-3, 1e-12)
    worst = 0.0
    for a, nv, idx in zip(analytic, numerics, probes):
        av = a.reshape(-1)[idx]
        denom = np.maximum(np.maximum(np.abs(av), np.abs(nv)), floor)
        worst = max(worst, float((np.abs(av - nv) / denom).max(initial=0.0)))
    return worst
