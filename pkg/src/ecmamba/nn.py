"""Minimal module system: parameter registration, initialisation, basic layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import Tensor, ops


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    # same bound as the usual a=sqrt(5) default for conv/linear layers
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=shape), dtype)


class Module:
    """Container whose Tensor attributes with ``requires_grad`` are parameters.

    Child modules may be attributes or lists of modules. Parameter names are
    dotted attribute paths, e.g. ``branch_r.enc0.ss2d.in_proj.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(value.shape):
                raise ValueError(f"{name}: shape {tuple(value.shape)} != expected {p.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True, dtype=np.float32):
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = kaiming_uniform(rng, (c_out, c_in // groups, kernel, kernel), fan_in, dtype)
        self.bias = parameter(np.zeros(c_out), dtype) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True, dtype=np.float32):
        self.weight = kaiming_uniform(rng, (c_in, c_out, kernel, kernel), c_out * kernel * kernel, dtype)
        self.bias = parameter(np.zeros(c_out), dtype) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride)


class Linear(Module):
    """Dense map over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = kaiming_uniform(rng, (d_out, d_in), d_in, dtype)
        self.bias = parameter(np.zeros(d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ChannelLayerNorm(Module):
    """LayerNorm across channels at every pixel of a [B, C, H, W] map."""

    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim), dtype)
        self.bias = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, axis=1, eps=self.eps)
