"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeMismatch, Tensor


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _shapes: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate: float) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        return cls(
            step=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            learning_rate=learning_rate,
            _shapes=[p.data.shape for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One in-place Adam update over all params; returns the advanced state."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeMismatch("params/grads/state lengths differ")
    for p, g, shape in zip(params, grads, state._shapes):
        if g is None:
            raise ValueError("missing gradient for a parameter")
        if g.shape != shape or p.data.shape != shape:
            raise ShapeMismatch(f"gradient shape {g.shape} does not match parameter {shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.data.dtype, copy=False)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)
    return state
