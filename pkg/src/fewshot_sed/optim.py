"""Adam on dictionaries of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new params and the advanced state.

    Only keys present in ``grads`` are updated; the inputs are left untouched.
    A step whose gradients contain NaN/inf is rejected before any state change.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {', '.join(sorted(bad))}")
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {g.shape}")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_state = AdamState(dict(state.m), dict(state.v), t, b1, b2, state.eps)
    new_params = dict(params)
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, g in grads.items():
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        new_state.m[k] = m
        new_state.v[k] = v
        new_params[k] = params[k] - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new_params, new_state
