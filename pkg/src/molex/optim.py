"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class ParamGroup:
    names: list[str]
    lr: float
    weight_decay: float = 0.0


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float, weight_decay: float, names=None):
    """One in-place AdamW update of ``params[name]`` for ``name`` in ``names``.

    Call ``state.step += 1`` once per optimizer step before updating the groups;
    bias correction uses ``state.step``.
    """
    names = list(params) if names is None else names
    t = state.step
    if t < 1:
        raise ValueError("increment state.step before calling adamw_step")
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in names:
        p = params[name]
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", step=t)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if weight_decay:
            p -= lr * weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, params: dict, groups: list[ParamGroup], betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.groups = groups
        self.state = OptimState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: dict, lr_scale: float = 1.0):
        self.state.step += 1
        for g in self.groups:
            adamw_step(self.params, grads, self.state, g.lr * lr_scale, g.weight_decay, g.names)


@dataclass(frozen=True)
class Schedule:
    """Multiplier on the peak learning rate at optimizer step ``s`` (1-based).

    Rises linearly to 1 at ``ceil(warmup_ratio * total_steps)``, then falls
    linearly to 0 at ``total_steps``.
    """

    total_steps: int
    warmup_ratio: float = 0.06

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_ratio * self.total_steps))

    def __call__(self, step: int) -> float:
        w = self.warmup_steps
        if step <= 0 or step >= self.total_steps:
            return 0.0
        if step <= w:
            return step / w
        return (self.total_steps - step) / (self.total_steps - w)
