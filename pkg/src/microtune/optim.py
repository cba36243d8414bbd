"""AdamW with decoupled weight decay, plus the learning-rate schedule.

The optimizer owns one (m, v) moment pair per named parameter. Frozen
weights never enter the parameter dict, so decay cannot touch them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

BETAS_DEFAULT = (0.9, 0.999)
EPS_DEFAULT = 1e-8


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = BETAS_DEFAULT,
    eps: float = EPS_DEFAULT,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected moment update, in place. t is 1-based.

    Decay is decoupled: it scales the incoming parameter value directly and
    never flows through the moment estimates.
    """
    if lr <= 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    if t < 1:
        raise ConfigError(f"step count must be >= 1, got {t}")
    b1, b2 = betas
    decay = lr * weight_decay * param if weight_decay else 0.0
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param -= decay


@dataclass
class AdamW:
    """Stateful wrapper over a named parameter dict."""

    params: dict[str, Tensor]
    lr: float = 3e-4
    betas: tuple[float, float] = BETAS_DEFAULT
    eps: float = EPS_DEFAULT
    weight_decay: float = 0.0
    t: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ConfigError(f"parameter {name!r} is frozen")
            self._m[name] = np.zeros_like(p.data)
            self._v[name] = np.zeros_like(p.data)

    def step(self, lr: float | None = None) -> None:
        """Apply one update using each parameter's accumulated gradient.

        Parameters whose grad is None are treated as zero-gradient (decay
        still applies). Pass lr to follow a schedule.
        """
        self.t += 1
        use_lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_step(p.data, grad, self._m[name], self._v[name], self.t,
                       use_lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def global_grad_norm(params: dict[str, Tensor]) -> float:
    """L2 norm over every accumulated gradient; None grads count as zero."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def lr_at(
    step: int,
    total_steps: int,
    peak_lr: float,
    warmup_steps: int = 0,
    floor_fraction: float = 0.1,
) -> float:
    """Linear warmup to peak_lr, then cosine decay to floor_fraction * peak.

    step is 0-based. The last warmup step reaches the peak exactly; steps at
    or past total_steps hold the floor.
    """
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= warmup_steps <= total_steps:
        raise ConfigError(
            f"warmup_steps must lie in [0, {total_steps}], got {warmup_steps}")
    if peak_lr <= 0:
        raise ConfigError(f"peak_lr must be positive, got {peak_lr}")
    if not 0.0 <= floor_fraction <= 1.0:
        raise ConfigError(f"floor_fraction must lie in [0, 1], got {floor_fraction}")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    floor = floor_fraction * peak_lr
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
