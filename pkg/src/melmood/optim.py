"""SGD and Adam parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import numpy as np

from .tensor import Tensor


@dataclass
class SgdConfig:
    lr: float = 1e-2
    momentum: float = 0.0
    kind: str = field(default="sgd", init=False)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kind: str = field(default="adam", init=False)


OptimizerConfig = Union[SgdConfig, AdamConfig]


class SGD:
    def __init__(self, params: List[Tuple[str, Tensor]], config: SgdConfig):
        if config.lr <= 0:
            raise ValueError("learning rate must be positive, got %r" % config.lr)
        self.params = params
        self.config = config
        self._velocity: Dict[str, np.ndarray] = {}

    def step(self) -> None:
        lr = self.config.lr
        mom = self.config.momentum
        for name, p in self.params:
            if p.grad is None:
                continue
            if mom != 0.0:
                v = self._velocity.get(name)
                if v is None:
                    v = np.zeros_like(p.data)
                v = mom * v + p.grad
                self._velocity[name] = v
                p.data -= lr * v
            else:
                p.data -= lr * p.grad

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: List[Tuple[str, Tensor]], config: AdamConfig):
        if config.lr <= 0:
            raise ValueError("learning rate must be positive, got %r" % config.lr)
        self.params = params
        self.config = config
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            mhat = m / bc1
            vhat = v / bc2
            p.data -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def make_optimizer(params: List[Tuple[str, Tensor]], config: OptimizerConfig):
    if isinstance(config, SgdConfig):
        return SGD(params, config)
    if isinstance(config, AdamConfig):
        return Adam(params, config)
    raise ValueError("unknown optimizer config %r" % (config,))
