"""Coarse depth remapping field: per-sample offset ``o`` and scale ``s``.

Three modes:

``none``           ``(o, s) = (0, 0)``
``global-affine``  two trainable scalars shared by every sample
``mlp``            a ReLU MLP over positional encodings of ``(u', v', z)``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("none", "global-affine", "mlp")


@dataclass(frozen=True)
class FieldConfig:
    mode: str = "mlp"
    layers: int = 2
    width: int = 16
    m: int = 3
    k: int = 5
    sigma_init: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown field mode {self.mode!r}")
        if self.mode == "mlp":
            if self.layers < 1 or self.width < 1 or self.m < 0 or self.k < 0 or not self.sigma_init > 0:
                raise ValueError("invalid MLP field configuration")

    @property
    def n_inputs(self) -> int:
        return 2 * (2 * self.m + 1) + (2 * self.k + 1)


PRESETS = {
    "mlp-s": FieldConfig("mlp", 2, 16, 3, 5),
    "mlp-m": FieldConfig("mlp", 2, 32, 3, 5),
    "mlp-xl": FieldConfig("mlp", 4, 128, 6, 16),
    "affine": FieldConfig("global-affine"),
    "none": FieldConfig("none"),
}


def positional_encode(x, degree: int) -> np.ndarray:
    """``(x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(n-1) pi x), cos(2^(n-1) pi x))``.

    Features are stacked on the last axis.
    """
    x = np.asarray(x, dtype=float)
    feats = [x]
    for i in range(degree):
        a = (2.0**i) * np.pi * x
        feats += [np.sin(a), np.cos(a)]
    return np.stack(feats, axis=-1)


def _encode_with_grad(x: np.ndarray, degree: int):
    feats = positional_encode(x, degree)
    d = [np.ones_like(x)]
    for i in range(degree):
        f = (2.0**i) * np.pi
        a = f * x
        d += [f * np.cos(a), -f * np.sin(a)]
    return feats, np.stack(d, axis=-1)


class CoarseField:
    """Parameters and evaluation of the coarse field.

    ``params`` is a flat list of arrays (weights then bias per layer for ``mlp``;
    ``[array([o, s])]`` for ``global-affine``; empty for ``none``) so that an
    optimiser can treat it generically.
    """

    def __init__(self, config: FieldConfig, params: list[np.ndarray] | None = None):
        self.config = config
        self.params = self.init_params(config, 0) if params is None else params
        self._check()

    @staticmethod
    def init_params(config: FieldConfig, seed) -> list[np.ndarray]:
        if config.mode == "none":
            return []
        if config.mode == "global-affine":
            return [np.zeros(2)]
        rng = np.random.default_rng(seed)
        sizes = [config.n_inputs] + [config.width] * config.layers + [2]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(rng.normal(0.0, config.sigma_init, (fan_in, fan_out)))
            params.append(rng.normal(0.0, config.sigma_init, fan_out))
        return params

    @classmethod
    def initialise(cls, config: FieldConfig, seed=0) -> "CoarseField":
        return cls(config, cls.init_params(config, seed))

    def _check(self):
        ref = self.init_params(self.config, 0)
        if len(ref) != len(self.params) or any(a.shape != b.shape for a, b in zip(ref, self.params)):
            raise ValueError("field parameters do not match the configuration")
        if any(not np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("non-finite field parameters")

    def copy(self) -> "CoarseField":
        return CoarseField(self.config, [p.copy() for p in self.params])

    def features(self, u, v, z) -> np.ndarray:
        c = self.config
        return np.concatenate([positional_encode(u, c.m), positional_encode(v, c.m), positional_encode(z, c.k)], axis=-1)

    def forward(self, u, v, z):
        """Evaluate ``(o, s)`` for every sample; returns ``(o, s, cache)``."""
        u, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, z)))
        n = u.shape
        mode = self.config.mode
        if mode == "none":
            return np.zeros(n), np.zeros(n), {"n": n}
        if mode == "global-affine":
            o_s = self.params[0]
            return np.full(n, o_s[0]), np.full(n, o_s[1]), {"n": n}
        c = self.config
        eu, du = _encode_with_grad(u.ravel(), c.m)
        ev, dv = _encode_with_grad(v.ravel(), c.m)
        ez, dz = _encode_with_grad(z.ravel(), c.k)
        h = np.concatenate([eu, ev, ez], axis=1)
        acts = [h]
        pre = []
        for i in range(c.layers):
            a = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(a)
            h = np.maximum(a, 0.0)
            acts.append(h)
        out = h @ self.params[-2] + self.params[-1]
        cache = {"n": n, "acts": acts, "pre": pre, "denc": (du, dv, dz)}
        return out[:, 0].reshape(n), out[:, 1].reshape(n), cache

    def __call__(self, u, v, z):
        o, s, _ = self.forward(u, v, z)
        return o, s

    def backward(self, cache, g_o, g_s, inputs: bool = False):
        """Parameter gradients (list matching ``params``) for cotangents on ``o``, ``s``.

        With ``inputs=True`` also returns ``(g_u, g_v, g_z)``.
        """
        n = cache["n"]
        g_o = np.broadcast_to(np.asarray(g_o, dtype=float), n).ravel()
        g_s = np.broadcast_to(np.asarray(g_s, dtype=float), n).ravel()
        mode = self.config.mode
        if mode == "none":
            grads = []
            g_in = tuple(np.zeros(n) for _ in range(3))
        elif mode == "global-affine":
            grads = [np.array([g_o.sum(), g_s.sum()])]
            g_in = tuple(np.zeros(n) for _ in range(3))
        else:
            c = self.config
            acts, pre = cache["acts"], cache["pre"]
            g = np.column_stack([g_o, g_s])
            grads = [None] * len(self.params)
            grads[-2] = acts[-1].T @ g
            grads[-1] = g.sum(axis=0)
            gh = g @ self.params[-2].T
            for i in reversed(range(c.layers)):
                ga = gh * (pre[i] > 0)
                grads[2 * i] = acts[i].T @ ga
                grads[2 * i + 1] = ga.sum(axis=0)
                gh = ga @ self.params[2 * i].T
            du, dv, dz = cache["denc"]
            nu, nv = du.shape[1], dv.shape[1]
            g_in = (
                np.sum(gh[:, :nu] * du, axis=1).reshape(n),
                np.sum(gh[:, nu : nu + nv] * dv, axis=1).reshape(n),
                np.sum(gh[:, nu + nv :] * dz, axis=1).reshape(n),
            )
        return (grads, g_in) if inputs else grads


def field_init(config: FieldConfig, seed=0) -> CoarseField:
    return CoarseField.initialise(config, seed)


def field_eval(field: CoarseField, u, v, z):
    return field(u, v, z)
