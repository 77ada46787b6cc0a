"""Adam with bias correction over a name -> array parameter mapping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import MutableMapping

import numpy as np

from graphmamba.errors import DimensionError, NonFiniteError


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: MutableMapping[str, np.ndarray],
    state: AdamState,
) -> AdamState:
    """Apply one Adam update in place.

    Every gradient is validated before anything is touched, so a rejected
    step leaves both ``params`` and ``state`` exactly as they were.
    """
    for path, p in params.items():
        if path not in grads:
            raise DimensionError(f"no gradient for parameter {path!r}")
        g = grads[path]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {path!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {path!r}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for path, p in params.items():
        g = grads[path].astype(p.dtype, copy=False)
        if path not in state.m:
            state.m[path] = np.zeros_like(p)
            state.v[path] = np.zeros_like(p)
        m, v = state.m[path], state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return state
