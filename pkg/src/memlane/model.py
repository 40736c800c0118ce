"""Fast/slow extractors over a shared ConvLSTM memory and an upsampling decoder.

Parameter names are canonical paths such as ``slow.conv3.weight`` or
``lstm.gate_i.bias``; checkpoints key on them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np

from .nn import ConvLayer, he_normal
from .rng import SplitMix64
from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    conv2d,
    mul,
    relu,
    reshape,
    sigmoid,
    split,
    tanh,
)

GATES = ("i", "f", "o", "g")


class ExtractorKind(enum.IntEnum):
    FAST = 0
    SLOW = 1

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class LayerSpec:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    padding: int
    transposed: bool = False
    relu: bool = True

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel
        return (self.cin, self.cout, k, k) if self.transposed else (self.cout, self.cin, k, k)

    @property
    def fan_in(self) -> int:
        return self.cin * self.kernel * self.kernel


@dataclass(frozen=True)
class ArchitectureConfig:
    input_size: int = 64
    feature_channels: int = 32
    memory_channels: int = 16
    downsample: int = 8
    gate_kernel: int = 3

    def __post_init__(self):
        stages = math.log2(self.downsample) if self.downsample > 0 else -1
        if stages < 1 or stages != int(stages):
            raise ValueError(f"downsample must be a power of two >= 2, got {self.downsample}")
        if self.input_size % self.downsample:
            raise ValueError(f"input_size {self.input_size} not divisible by downsample {self.downsample}")
        if self.feature_channels < 1 or self.memory_channels < 1:
            raise ValueError("feature_channels and memory_channels must be >= 1")

    @classmethod
    def full_scale(cls) -> "ArchitectureConfig":
        return cls(input_size=224, feature_channels=512, memory_channels=128, downsample=32)

    @property
    def stages(self) -> int:
        return int(math.log2(self.downsample))

    @property
    def memory_size(self) -> int:
        return self.input_size // self.downsample

    @lru_cache(maxsize=None)
    def fast_layers(self) -> tuple[LayerSpec, ...]:
        layers, cin = [], 3
        for i in range(self.stages):
            cout = 8 << i
            layers.append(LayerSpec(f"fast.conv{i}", cin, cout, 3, 2, 1))
            cin = cout
        layers.append(LayerSpec(f"fast.conv{self.stages}", cin, self.feature_channels, 1, 1, 0, relu=False))
        return tuple(layers)

    @lru_cache(maxsize=None)
    def slow_layers(self) -> tuple[LayerSpec, ...]:
        layers = [LayerSpec("slow.conv0", 3, 16, 3, 1, 1)]
        cin = 16
        for _ in range(self.stages):
            cout = 2 * cin
            layers.append(LayerSpec(f"slow.conv{len(layers)}", cin, cout, 3, 2, 1))
            layers.append(LayerSpec(f"slow.conv{len(layers)}", cout, cout, 3, 1, 1))
            cin = cout
        layers.append(LayerSpec(f"slow.conv{len(layers)}", cin, self.feature_channels, 1, 1, 0, relu=False))
        return tuple(layers)

    @lru_cache(maxsize=None)
    def gate_layers(self) -> tuple[LayerSpec, ...]:
        cin = self.feature_channels + self.memory_channels
        k = self.gate_kernel
        return tuple(LayerSpec(f"lstm.gate_{g}", cin, self.memory_channels, k, 1, k // 2, relu=False) for g in GATES)

    @lru_cache(maxsize=None)
    def decoder_layers(self) -> tuple[LayerSpec, ...]:
        layers, cin = [], self.memory_channels
        for i in range(self.stages):
            cout = max(cin // 2, 4)
            layers.append(LayerSpec(f"decoder.deconv{i}", cin, cout, 4, 2, 1, transposed=True))
            cin = cout
        layers.append(LayerSpec("decoder.head", cin, 1, 1, 1, 0, relu=False))
        return tuple(layers)

    @lru_cache(maxsize=None)
    def all_layers(self) -> tuple[LayerSpec, ...]:
        return self.fast_layers() + self.slow_layers() + self.gate_layers() + self.decoder_layers()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for spec in self.all_layers():
            shapes[f"{spec.name}.weight"] = spec.weight_shape
            shapes[f"{spec.name}.bias"] = (spec.cout,)
        return shapes


@dataclass
class ModelParams:
    arch: ArchitectureConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self, dtype=None) -> "ModelParams":
        return ModelParams(
            self.arch,
            {n: Tensor(t.data, requires_grad=True, dtype=dtype or t.dtype) for n, t in self.tensors.items()},
        )

    def layer(self, spec: LayerSpec) -> ConvLayer:
        return ConvLayer(
            self.tensors[f"{spec.name}.weight"],
            self.tensors[f"{spec.name}.bias"],
            spec.stride,
            spec.padding,
            spec.transposed,
        )

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(arch: ArchitectureConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal conv weights from one seeded stream; zero biases except forget gate = +1."""
    rng = SplitMix64(seed)
    tensors: dict[str, Tensor] = {}
    for spec in arch.all_layers():
        w = he_normal(rng, spec.weight_shape, spec.fan_in, dtype)
        b = np.full(spec.cout, 1.0 if spec.name == "lstm.gate_f" else 0.0, dtype=dtype)
        tensors[f"{spec.name}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
        tensors[f"{spec.name}.bias"] = Tensor(b, requires_grad=True, dtype=dtype)
    return ModelParams(arch, tensors)


@dataclass
class MemoryState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, arch: ArchitectureConfig, dtype=None) -> "MemoryState":
        shape = (arch.memory_channels, arch.memory_size, arch.memory_size)
        return cls(Tensor.zeros(shape, dtype=dtype), Tensor.zeros(shape, dtype=dtype))

    def clear(self) -> None:
        self.h = Tensor.zeros(self.h.shape, dtype=self.h.dtype)
        self.c = Tensor.zeros(self.c.shape, dtype=self.c.dtype)

    def is_zero(self) -> bool:
        return not self.h.data.any() and not self.c.data.any()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.h.shape


# stages ----------------------------------------------------------------------------


def _check_image(image: Tensor, arch: ArchitectureConfig) -> None:
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] % arch.downsample or image.shape[2] % arch.downsample:
        raise ShapeError(
            f"expected an image of shape (3,H,W) with H,W divisible by {arch.downsample}, got {image.shape}"
        )


def _run_stack(x: Tensor, params: ModelParams, specs: tuple[LayerSpec, ...]) -> Tensor:
    for spec in specs:
        x = params.layer(spec)(x)
        if spec.relu:
            x = relu(x)
    return x


def _extract(image: Tensor, params: ModelParams, specs: tuple[LayerSpec, ...]) -> Tensor:
    _check_image(image, params.arch)
    x = reshape(image, (1,) + image.shape)
    x = _run_stack(x, params, specs)
    return reshape(x, x.shape[1:])


def extract_fast(image: Tensor, params: ModelParams) -> Tensor:
    return _extract(image, params, params.arch.fast_layers())


def extract_slow(image: Tensor, params: ModelParams) -> Tensor:
    return _extract(image, params, params.arch.slow_layers())


def extract(image: Tensor, kind: ExtractorKind, params: ModelParams) -> Tensor:
    return extract_slow(image, params) if kind == ExtractorKind.SLOW else extract_fast(image, params)


def convlstm_step(feat: Tensor, state: MemoryState, params: ModelParams) -> tuple[Tensor, MemoryState]:
    """One ConvLSTM step; returns the new hidden map and the propagated state.

    All four gates come from one convolution over the channel concat [feat; h]
    with the per-gate weights stacked along the output axis.
    """
    if feat.ndim != 3 or feat.shape[1:] != state.h.shape[1:]:
        raise ShapeError(f"feature map {feat.shape} does not match memory geometry {state.h.shape}")
    arch = params.arch
    hc = arch.memory_channels
    x = concat([feat, state.h], axis=0)
    x = reshape(x, (1,) + x.shape)
    weight = concat([params[f"lstm.gate_{g}.weight"] for g in GATES], axis=0)
    bias = concat([params[f"lstm.gate_{g}.bias"] for g in GATES], axis=0)
    pre = conv2d(x, weight, bias, stride=1, padding=arch.gate_kernel // 2)
    pre = reshape(pre, (4 * hc,) + pre.shape[2:])
    zi, zf, zo, zg = split(pre, 4, axis=0)
    i, f, o, g = sigmoid(zi), sigmoid(zf), sigmoid(zo), tanh(zg)
    c_next = add(mul(f, state.c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, MemoryState(h_next, c_next)


def decode(mem_out: Tensor, params: ModelParams) -> Tensor:
    arch = params.arch
    if mem_out.ndim != 3 or mem_out.shape[0] != arch.memory_channels:
        raise ShapeError(f"decoder expects ({arch.memory_channels},h,w), got {mem_out.shape}")
    x = reshape(mem_out, (1,) + mem_out.shape)
    x = _run_stack(x, params, arch.decoder_layers())
    return reshape(x, x.shape[1:])


def forward_frame(
    image: Tensor, kind: ExtractorKind, state: MemoryState, params: ModelParams
) -> tuple[Tensor, MemoryState]:
    feat = extract(image, kind, params)
    if feat.shape[1:] != state.h.shape[1:]:
        raise ShapeError(f"image {image.shape} maps to features {feat.shape}, memory is {state.h.shape}")
    out, next_state = convlstm_step(feat, state, params)
    return decode(out, params), next_state


# analytic cost ----------------------------------------------------------------------


def _layer_macs(spec: LayerSpec, size: int) -> tuple[int, int]:
    """MACs of one layer and its output extent for a square input of ``size``."""
    k = spec.kernel
    if spec.transposed:
        out = (size - 1) * spec.stride - 2 * spec.padding + k
        return spec.cin * spec.cout * k * k * size * size, out
    out = (size + 2 * spec.padding - k) // spec.stride + 1
    return spec.cout * spec.cin * k * k * out * out, out


def stack_macs(specs: tuple[LayerSpec, ...], size: int) -> int:
    total = 0
    for spec in specs:
        macs, size = _layer_macs(spec, size)
        total += macs
    return total


def mac_count(arch: ArchitectureConfig, part: str) -> int:
    """Analytic multiply-accumulate count of ``fast``, ``slow``, ``lstm`` or ``decoder``."""
    if part == "fast":
        return stack_macs(arch.fast_layers(), arch.input_size)
    if part == "slow":
        return stack_macs(arch.slow_layers(), arch.input_size)
    if part == "lstm":
        return stack_macs(arch.gate_layers(), arch.memory_size)
    if part == "decoder":
        return stack_macs(arch.decoder_layers(), arch.memory_size)
    raise ValueError(f"unknown part {part!r}")
