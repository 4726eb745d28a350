"""Adaptive-moment (Adam) parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import GradientError


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def adam_update(
    params: list[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> AdamState:
    """One in-place Adam step over named parameters.

    Refuses non-finite gradients, naming the offending parameter.
    """
    for name, _ in params:
        g = grads[name]
        # a non-finite entry poisons the sum; avoids a full isfinite pass
        if not np.isfinite(g.sum()):
            raise GradientError(name)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params:
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def adam_step(params: list[tuple[str, Tensor]], state: AdamState) -> AdamState:
    """Adam step reading each parameter's accumulated ``grad`` in place.

    Parameters untouched by the last backward pass (grad None) are skipped.
    """
    live = [(name, p) for name, p in params if p.grad is not None]
    return adam_update(live, {name: p.grad for name, p in live}, state)
