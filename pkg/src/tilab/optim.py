"""Adam with coupled (L2-style) weight decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(params.map(np.zeros_like), params.map(np.zeros_like), 0)


def adam_step(state: AdamState, params: ModelParams, grads: ModelParams, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state.

    Weight decay is added to the gradient before the moment updates, as in
    ``torch.optim.Adam(weight_decay=...)``.
    """
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return ModelParams(*new_p), AdamState(ModelParams(*new_m), ModelParams(*new_v), t)
