"""AdamW with decoupled weight decay over named parameter arrays."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0  # number of applied (non-skipped) updates
    skipped: int = 0

    @classmethod
    def zeros_like(cls, arrays: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t, self.skipped
        )


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> bool:
    """Update ``params`` and ``state`` in place. Returns False if the step was skipped.

    A missing (None) gradient counts as zero, so unused parameters still decay
    and their moments still relax. Any non-finite gradient skips the whole step.
    """
    for name, a in params.items():
        g = grads.get(name)
        if g is not None and g.shape != a.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {a.shape} for {name}")
        if state.m[name].shape != a.shape:
            raise ValueError(f"adamw_step: moment shape mismatch for {name}")
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("adamw_step: non-finite gradient, step skipped (%d so far)", state.skipped)
        return False
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, a in params.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * g * g
        a *= 1.0 - lr * weight_decay
        a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True
