"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mimae.errors import ContractError


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus shared hyperparameters.

    ``no_decay`` names parameters excluded from weight decay.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def adamw_step(params: dict, state: OptimizerState, lr: float) -> None:
    """Apply one AdamW update in place to the named ``params``.

    Weight decay is applied as ``p <- p - lr * wd * p`` before the Adam step.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adamw_step: no gradient for {', '.join(missing[:5])}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if state.weight_decay and name not in state.no_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p.data -= (lr / bc1) * m / denom


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.min_lr <= self.base_lr:
            raise ContractError(f"need 0 <= min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractError(f"need 0 <= warmup_steps <= total_steps, got "
                                f"{self.warmup_steps}, {self.total_steps}")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr``."""
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    decay_steps = sched.total_steps - sched.warmup_steps
    if decay_steps == 0:
        return sched.base_lr
    progress = (step - sched.warmup_steps) / decay_steps
    return sched.min_lr + (sched.base_lr - sched.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
