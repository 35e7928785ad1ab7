from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: Dict[Hashable, np.ndarray] = field(default_factory=dict)
    v: Dict[Hashable, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[Hashable, np.ndarray], grads: Dict[Hashable, np.ndarray],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update; parameters are modified in place.

    Parameters without a gradient entry are left alone.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        m = state.m.get(key)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
