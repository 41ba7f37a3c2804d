"""Gradient clipping, the warmup-cosine schedule and AdamW."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Parameter


def global_grad_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.trainable:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_global_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all trainable grads by max_norm/g when their joint L2 norm g exceeds max_norm.

    Returns the pre-clip norm.
    """
    if not max_norm > 0:
        raise ContractError(f"clip norm must be positive, got {max_norm}")
    g = global_grad_norm(params)
    if g > max_norm:
        factor = max_norm / g
        for p in params:
            if p.trainable:
                p.grad *= p.grad.dtype.type(factor)
    return g


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup_ratio * self.total_steps))


def learning_rate(step: int, config: OptimizerConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to zero at ``total_steps``."""
    if step < 1:
        raise ContractError(f"step index starts at 1, got {step}")
    base, total, warm = config.learning_rate, config.total_steps, config.warmup_steps
    if warm and step <= warm:
        return base * step / warm
    if step >= total:
        return 0.0
    progress = (step - warm) / (total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    """AdamW with decoupled weight decay over a fixed parameter list."""

    params: list[Parameter]
    config: OptimizerConfig
    _m: list[np.ndarray] = field(init=False, repr=False)
    _v: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.params = [p for p in self.params if p.trainable]
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, step_index: int) -> float:
        """Apply one update; returns the learning rate used."""
        cfg = self.config
        lr = learning_rate(step_index, cfg)
        c1 = 1.0 - cfg.beta1 ** step_index
        c2 = 1.0 - cfg.beta2 ** step_index
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay:
                p.data -= p.dtype.type(lr * cfg.weight_decay) * p.data
            update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            p.data -= (lr * update).astype(p.dtype, copy=False)
        return lr


def optimizer_step(optimizer: AdamW, step_index: int) -> float:
    return optimizer.step(step_index)
