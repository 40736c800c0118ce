"""Layers, initialization and the Adam optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .rng import SplitMix64
from .tensor import Tensor, conv2d, conv_transpose2d


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        kh, kw = self.weight.shape[2:]
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel extents must be >= 1, got {kh}x{kw}")

    def __call__(self, x: Tensor) -> Tensor:
        fn = conv_transpose2d if self.transposed else conv2d
        return fn(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def he_normal(rng: SplitMix64, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return (rng.normal(int(np.prod(shape))) * std).astype(dtype).reshape(shape)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale grads in place so their joint L2 norm is at most ``max_norm``."""
    params = list(params)
    norm = grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update. Grads are left for the caller to zero."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (state.lr / corr1) * m / (np.sqrt(v / corr2) + state.eps_stab)
        p.data -= step.astype(p.data.dtype, copy=False)
