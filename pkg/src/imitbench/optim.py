"""Adam with decoupled multiplicative weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    """A gradient array contains nan or inf; carries the parameter index."""

    def __init__(self, index: int):
        super().__init__(f"non-finite gradient for parameter {index}")
        self.index = index


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0


def adam_init(params: list) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step_count=0,
    )


def adam_step(
    params: list,
    grads: list,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update; returns (new params, new state), inputs untouched.

    Weight decay is decoupled: parameters shrink by (1 - lr*decay) before
    the moment update, so decay never enters the running moments.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must have matching lengths")
    t = state.step_count + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if g.shape != p.shape:
            raise ValueError(f"parameter {i}: grad shape {g.shape} != param shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(i)
        if weight_decay:
            p = p * (1.0 - lr * weight_decay)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=new_m, v=new_v, step_count=t)
