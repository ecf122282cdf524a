"""Adam with bias correction and box projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "Moments":
        return cls(np.zeros_like(p, dtype=float), np.zeros_like(p, dtype=float), 0)

    def subset(self, keep: np.ndarray) -> "Moments":
        return Moments(self.m[keep].copy(), self.v[keep].copy(), self.t)


@dataclass
class AdamState:
    """Moment buffers keyed by parameter name; each group keeps its own step count."""

    groups: dict = field(default_factory=dict)
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    def get(self, name: str, like: np.ndarray) -> Moments:
        mom = self.groups.get(name)
        if mom is None:
            mom = self.groups[name] = Moments.zeros_like(like)
        elif mom.m.shape != np.shape(like):
            raise ValueError(f"moment shape mismatch for {name!r}: {mom.m.shape} vs {np.shape(like)}")
        return mom


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, bounds: dict | None = None) -> dict:
    """One Adam update of every entry in ``grads``; returns the new parameter dict.

    ``bounds`` maps a name to ``(lo, hi)`` (scalars or arrays) and the updated
    value is clipped into that box.  Parameters without a gradient are passed
    through untouched.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    bounds = bounds or {}
    out = dict(params)
    for name, g in grads.items():
        p = np.asarray(params[name], dtype=float)
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: {g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        mom = state.get(name, p)
        mom.t += 1
        mom.m = state.beta1 * mom.m + (1.0 - state.beta1) * g
        mom.v = state.beta2 * mom.v + (1.0 - state.beta2) * g * g
        m_hat = mom.m / (1.0 - state.beta1**mom.t)
        v_hat = mom.v / (1.0 - state.beta2**mom.t)
        new = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if name in bounds:
            lo, hi = bounds[name]
            new = np.clip(new, lo, hi)
        out[name] = new
    return out
