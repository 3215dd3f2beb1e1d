"""Skippable residual blocks, the always-run stem and head, and MACC accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from codinet import ops
from codinet.rng import Rng
from codinet.tensor import DimensionError, Tensor

BLOCK_KINDS = ("conv", "dense")


@dataclass(frozen=True)
class BlockSpec:
    """Shape of one gated block.

    ``conv`` blocks map ``(channels, height, width)`` to itself with two 3x3
    convolutions; ``dense`` blocks map a ``channels``-vector to itself with
    two fully connected layers (height and width are ignored).
    """

    kind: str
    channels: int
    height: int = 1
    width: int = 1

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        extents = (self.channels,) if self.kind == "dense" else (self.channels, self.height, self.width)
        if any(int(e) <= 0 for e in extents):
            raise ValueError(f"block extents must be positive, got {self}")

    @property
    def activation_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.channels,)
        return (self.channels, self.height, self.width)


def block_macc(spec: BlockSpec) -> int:
    """Multiply-accumulates of one residual block (two layers; bias/activation excluded)."""
    if spec.kind == "dense":
        return 2 * spec.channels * spec.channels
    return 2 * (spec.height * spec.width * spec.channels * spec.channels * 9)


@dataclass(frozen=True)
class CostTable:
    """Per-gated-block cost ``c_k`` in MACCs."""

    entries: Tuple[int, ...]

    def __post_init__(self):
        if any(c <= 0 for c in self.entries):
            raise ValueError("every block cost must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def total(self) -> int:
        return int(sum(self.entries))

    def as_array(self, unit: str = "macc") -> np.ndarray:
        """Costs as float64 in ``macc``, ``gmacc`` (1e9 MACCs) or ``fraction`` of the total."""
        arr = np.asarray(self.entries, dtype=np.float64)
        if unit == "macc":
            return arr
        if unit == "gmacc":
            return arr / 1e9
        if unit == "fraction":
            return arr / arr.sum() if arr.size else arr
        raise ValueError(f"unknown cost unit {unit!r}")


@dataclass(frozen=True)
class NetSpec:
    """Architecture descriptor shared by the network, the cost table and the config."""

    kind: str = "conv"
    depth: int = 6
    channels: int = 16
    input_shape: Tuple[int, ...] = (1, 16, 16)
    num_classes: int = 8
    downsample: int = 2
    router_hidden: int = 16

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"net.kind must be one of {BLOCK_KINDS}, got {self.kind!r}")
        if self.depth < 0:
            raise ValueError("net.depth must be non-negative")
        if self.channels <= 0 or self.num_classes <= 0 or self.router_hidden <= 0:
            raise ValueError("net.channels, net.num_classes and router.hidden_dim must be positive")
        if self.kind == "conv":
            if len(self.input_shape) != 3:
                raise ValueError("conv nets take (C, H, W) inputs")
            if self.downsample < 1:
                raise ValueError("net.downsample must be >= 1")
            _, h, w = self.input_shape
            if h % self.downsample or w % self.downsample:
                raise ValueError("input extent not divisible by net.downsample")
        elif len(self.input_shape) != 1:
            raise ValueError("dense nets take flat (D,) inputs")

    def block_spec(self) -> BlockSpec:
        if self.kind == "dense":
            return BlockSpec("dense", self.channels)
        _, h, w = self.input_shape
        return BlockSpec("conv", self.channels, h // self.downsample, w // self.downsample)

    def block_specs(self) -> List[BlockSpec]:
        return [self.block_spec() for _ in range(self.depth)]


def build_cost_table(blocks: "NetSpec | Sequence[BlockSpec]") -> CostTable:
    specs = blocks.block_specs() if isinstance(blocks, NetSpec) else list(blocks)
    return CostTable(tuple(block_macc(s) for s in specs))


def _he_normal(rng: Rng, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ResidualBlock:
    """``F(a) = a + f(a)`` where ``f`` is conv-ReLU-conv or FC-ReLU-FC.

    ``evaluations`` counts per-sample executions of the block.
    """

    def __init__(self, spec: BlockSpec, rng: Optional[Rng] = None, dtype=np.float64, residual_scale: float = 1.0):
        self.spec = spec
        c = spec.channels
        if spec.kind == "conv":
            wshape, fan_in = (c, c, 3, 3), 9 * c
        else:
            wshape, fan_in = (c, c), c
        if rng is None:
            w1 = np.zeros(wshape, dtype)
            w2 = np.zeros(wshape, dtype)
        else:
            w1 = _he_normal(rng.child("w1"), wshape, fan_in, dtype)
            w2 = _he_normal(rng.child("w2"), wshape, fan_in, dtype) * residual_scale
        self.w1 = Tensor(w1, requires_grad=True, name="w1")
        self.b1 = Tensor(np.zeros(c, dtype), requires_grad=True, name="b1")
        self.w2 = Tensor(w2, requires_grad=True, name="w2")
        self.b2 = Tensor(np.zeros(c, dtype), requires_grad=True, name="b2")
        self.evaluations = 0

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def residual(self, a: Tensor) -> Tensor:
        if self.spec.kind == "conv":
            h = ops.relu(ops.conv2d(a, self.w1, self.b1))
            return ops.conv2d(h, self.w2, self.b2)
        h = ops.relu(ops.linear(a, self.w1, self.b1))
        return ops.linear(h, self.w2, self.b2)

    def __call__(self, a: Tensor) -> Tensor:
        expected = self.spec.activation_shape
        if a.shape[-len(expected):] != expected or a.ndim not in (len(expected), len(expected) + 1):
            raise DimensionError(f"block expects {expected} activations, got {a.shape}")
        self.evaluations += 1 if a.ndim == len(expected) else a.shape[0]
        return a + self.residual(a)


class Stem:
    """Always-executed input stage: conv (or FC), ReLU, optional average-pool downsampling."""

    def __init__(self, net: NetSpec, rng: Rng, dtype=np.float64):
        self.net = net
        if net.kind == "conv":
            c_in = net.input_shape[0]
            self.weight = Tensor(_he_normal(rng, (net.channels, c_in, 3, 3), 9 * c_in, dtype), requires_grad=True)
        else:
            d_in = net.input_shape[0]
            self.weight = Tensor(_he_normal(rng, (net.channels, d_in), d_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(net.channels, dtype), requires_grad=True)

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        if self.net.kind == "conv":
            a = ops.relu(ops.conv2d(x, self.weight, self.bias))
            if self.net.downsample > 1:
                a = ops.avg_pool2d(a, self.net.downsample)
            return a
        return ops.relu(ops.linear(x, self.weight, self.bias))


class Head:
    """Global average pooling (conv nets) followed by a linear classifier."""

    def __init__(self, net: NetSpec, rng: Rng, dtype=np.float64):
        self.net = net
        self.weight = Tensor(_he_normal(rng, (net.num_classes, net.channels), net.channels, dtype) * 0.5, requires_grad=True)
        self.bias = Tensor(np.zeros(net.num_classes, dtype), requires_grad=True)

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, a: Tensor) -> Tensor:
        if self.net.kind == "conv":
            a = ops.global_avg_pool(a)
        return ops.linear(a, self.weight, self.bias)
