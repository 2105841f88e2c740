"""Adam with bias correction and coupled (L2) weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError


@dataclass
class AdamState:
    """Moments plus per-parameter step counts; ``t`` counts optimizer calls."""

    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
            {k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
            {k: 0 for k in params},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg):
    """One Adam update; returns ``(new_params, new_state)`` without mutating inputs.

    ``cfg`` needs ``lr``, ``beta1``, ``beta2``, ``weight_decay`` and ``adam_eps``.
    The decay term ``weight_decay * p`` is added to the gradient before the
    moment updates.  Parameters missing from ``grads`` (not reached by the
    loss) are left untouched, and bias correction uses each parameter's own
    step count, so a parameter first trained late starts with a fresh
    first step.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v, new_steps = {}, {}, {}, dict(state.steps)
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        m0 = state.m.get(name, np.zeros_like(p))
        v0 = state.v.get(name, np.zeros_like(p))
        if m0.shape != p.shape or v0.shape != p.shape:
            raise DimensionError(f"optimizer moments for {name} do not match shape {p.shape}")
        if g is None:
            # not part of this step's loss: no decay, moments and step count frozen
            new_params[name], new_m[name], new_v[name] = p, m0, v0
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        k = state.steps.get(name, 0) + 1
        m = b1 * m0 + (1.0 - b1) * g
        v = b2 * v0 + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**k)
        v_hat = v / (1.0 - b2**k)
        new_params[name] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name], new_steps[name] = m, v, k
    return new_params, AdamState(state.t + 1, new_m, new_v, new_steps)
