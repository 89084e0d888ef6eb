"""Parameter containers and small reusable layers."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(array: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.array(array, dtype=dtype), requires_grad=True)


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def uniform(rng: np.random.Generator, shape: Tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Holds parameters and child modules as attributes.

    Parameter names are dotted attribute paths, and list-valued attributes
    contribute their index (``blocks.0.conv1.weight``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False,
                 bias: bool = True):
        w = np.zeros((d_in, d_out)) if zero else uniform(rng, (d_in, d_out), np.sqrt(1.0 / d_in))
        self.weight = parameter(w)
        if bias:
            self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if hasattr(self, "bias") else y


class Conv(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, padding: int = 1, bias: bool = True):
        fan_in = kernel * kernel * c_in
        self.weight = parameter(he_normal(rng, (kernel, kernel, c_in, c_out), fan_in))
        if bias:
            self.bias = parameter(np.zeros(c_out))
        self._stride, self._padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        bias = self.bias if hasattr(self, "bias") else Tensor(np.zeros(self.weight.shape[-1], self.weight.dtype))
        return ops.conv2d(x, self.weight, bias, stride=self._stride, padding=self._padding)


class DeformConv(Module):
    """3x3 deformable convolution; the offset predictor starts at zero."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, padding: int = 1):
        fan_in = kernel * kernel * c_in
        self.weight = parameter(he_normal(rng, (kernel, kernel, c_in, c_out), fan_in))
        self.bias = parameter(np.zeros(c_out))
        self.offset_weight = parameter(np.zeros((kernel, kernel, c_in, 2 * kernel * kernel)))
        self.offset_bias = parameter(np.zeros(2 * kernel * kernel))
        self._stride, self._padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.deformable_conv2d(
            x, self.weight, self.bias, self.offset_weight, self.offset_bias,
            stride=self._stride, padding=self._padding,
        )


class Affine(Module):
    """Per-channel learned scale and shift."""

    def __init__(self, channels: int, scale: float = 1.0):
        self.scale = parameter(np.full(channels, scale))
        self.shift = parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return x * self.scale + self.shift


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))
