"""Parameter-owning layers arranged in a module tree.

A Module discovers parameters, buffers, and children by scanning its own
attributes (and lists of modules) in definition order, which keeps parameter
names unique and stable across runs for checkpoint compatibility.
"""

from __future__ import annotations

import math
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base of the layer tree. Subclasses must call super().__init__() first."""

    buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, val in self.__dict__.items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield "%s.%d" % (name, i), item

    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, val in self.__dict__.items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for cname, child in self.named_children():
            yield from child.named_params(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        """Non-learned state (running statistics) included in checkpoints."""
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for cname, child in self.named_children():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval', got %r" % mode)
        flag = mode == "train"
        for m in self.modules():
            m.training = flag

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())


class Sequential(Module):
    def __init__(self, *steps: Module):
        super().__init__()
        self.steps: List[Module] = list(steps)

    def append(self, m: Module) -> None:
        self.steps.append(m)

    def forward(self, x: Tensor) -> Tensor:
        for step in self.steps:
            x = step(x)
        return x


def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def _zeros(shape: Tuple[int, ...], dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        k: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _kaiming_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype)
        self.bias: Optional[Tensor] = _zeros((out_ch,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(
        self,
        channels: int,
        k: int = 3,
        stride: int = 1,
        padding: int = 1,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _kaiming_uniform(rng, (channels, k, k), k * k, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = _kaiming_uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias: Optional[Tensor] = _zeros((out_features,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, *, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = _zeros((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            eps=self.eps,
            momentum=self.momentum,
        )


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(x)


class ReLU6(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.relu6(x)


class MaxPool2d(Module):
    def __init__(self, k: int, stride: int, padding: int = 0):
        super().__init__()
        self.k = k
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.maxpool2d(x, k=self.k, stride=self.stride, padding=self.padding)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.global_avgpool(x)


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.flatten(x)


class Dropout(Module):
    """Training-mode masks are drawn from the generator injected at build time."""

    def __init__(self, p: float, *, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, training=self.training, rng=self.rng)
