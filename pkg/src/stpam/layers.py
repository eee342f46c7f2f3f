"""Learnable layers: Chebyshev graph convolution, dense, 2-D convolution, reduction head."""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .graph import GraphSpec


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator so initial values do not depend on construction order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def glorot(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError


class ChebConvLayer(Layer):
    """y = act(sum_k T_k(L~) X w_k) over the nodes of a fixed graph."""

    def __init__(self, graph: GraphSpec, f_in: int, f_out: int, name: str, seed: int = 0,
                 activation: str = "relu"):
        if f_in < 1 or f_out < 1:
            raise ValueError("feature sizes must be positive")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.graph = graph
        self.f_in, self.f_out = f_in, f_out
        self.name = name
        self.activation = activation
        self.weights = [
            Tensor(glorot((f_in, f_out), f_in, f_out, param_rng(seed, f"{name}.w{k}")),
                   requires_grad=True, name=f"{name}.w{k}")
            for k in range(graph.order + 1)
        ]
        self._basis = [Tensor(T) for T in graph.basis[1:]]

    @property
    def order(self) -> int:
        return self.graph.order

    def parameters(self) -> dict[str, Tensor]:
        return {w.name: w for w in self.weights}

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[-2] != self.graph.n or x.shape[-1] != self.f_in:
            raise DimensionError(
                f"{self.name}: expected (..., {self.graph.n}, {self.f_in}) input, got {x.shape}")
        # T_0 = I, so the k=0 term is x itself
        parts = [x] + [ad.matmul(T, x) for T in self._basis]
        z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        w = self.weights[0] if len(self.weights) == 1 else ad.concat(self.weights, axis=0)
        out = ad.matmul(z, w)
        return ad.relu(out) if self.activation == "relu" else out


class FcLayer(Layer):
    def __init__(self, f_in: int, f_out: int, name: str, seed: int = 0):
        self.f_in, self.f_out = f_in, f_out
        self.name = name
        self.weight = Tensor(glorot((f_in, f_out), f_in, f_out, param_rng(seed, f"{name}.W")),
                             requires_grad=True, name=f"{name}.W")
        self.bias = Tensor(np.zeros(f_out), requires_grad=True, name=f"{name}.b")

    def parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.f_in:
            raise DimensionError(f"{self.name}: expected {self.f_in} input features, got {x.shape}")
        if x.ndim == 1:
            return ad.add(ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), self.weight), (-1,)), self.bias)
        y = ad.matmul(x, self.weight)
        return ad.add(y, ad.expand(self.bias, y.shape))


class Conv2dLayer(Layer):
    """Same-padded 2-D convolution with per-channel bias; input layout (..., H, Cin, W)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, name: str, seed: int = 0):
        if kernel % 2 == 0:
            raise ValueError("kernel extent must be odd")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.padding = kernel // 2
        self.name = name
        area = kernel * kernel
        self.weight = Tensor(
            glorot((c_out, c_in, kernel, kernel), c_in * area, c_out * area, param_rng(seed, f"{name}.W")),
            requires_grad=True, name=f"{name}.W")
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")

    def parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)


class ReductionHead(Layer):
    """Collapse per-expert spatial features (E of them, each C x d) to one vector.

    Experts are stacked as input channels of a 3x3 convolution; after ReLU the
    electrode axis is averaged away, so the output size does not depend on C.
    """

    def __init__(self, n_experts: int, d: int, d_out: int, name: str = "psl.reduce",
                 channels: int = 8, kernel: int = 3, seed: int = 0):
        self.n_experts = n_experts
        self.d, self.d_out = d, d_out
        self.conv = Conv2dLayer(n_experts, channels, kernel, f"{name}.conv", seed)
        self.fc = FcLayer(channels * d, d_out, f"{name}.fc", seed)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.conv.parameters(), **self.fc.parameters()}

    def __call__(self, features: Sequence[Tensor]) -> Tensor:
        if len(features) != self.n_experts:
            raise DimensionError(f"expected {self.n_experts} expert features, got {len(features)}")
        return self.reduce_stacked(ad.stack(features, axis=-2))

    def reduce_stacked(self, stacked: Tensor) -> Tensor:
        """(..., C, E, d) -> (..., d_out)."""
        if stacked.shape[-2] != self.n_experts or stacked.shape[-1] != self.d:
            raise DimensionError(f"expected (..., C, {self.n_experts}, {self.d}), got {stacked.shape}")
        h = ad.relu(self.conv(stacked))                # (..., C, ch, d)
        h = ad.mean(h, axis=-3)                        # (..., ch, d)
        return ad.relu(self.fc(ad.flatten(h, start=h.ndim - 2)))


def psl_reduce(head: ReductionHead, stacked: Tensor) -> Tensor:
    return head.reduce_stacked(stacked)


def pool_mean(outputs: Sequence[Tensor]) -> Tensor:
    outputs = list(outputs)
    if not outputs:
        raise DimensionError("nothing to pool")
    acc = outputs[0]
    for o in outputs[1:]:
        acc = ad.add(acc, o)
    return ad.scale(acc, 1.0 / len(outputs)) if len(outputs) > 1 else acc


def pool_mean3(o1: Tensor, o2: Tensor, o3: Tensor) -> Tensor:
    return pool_mean([o1, o2, o3])
