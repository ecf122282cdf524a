"""Objective terms and their cotangents.

Norms ``||x||`` are means over the contributing elements (of squares by
default, or their root), so loss values do not depend on image resolution.
Each function returns the scalar and the cotangent(s) of its differentiable
inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import View, project_points
from .imageops import (
    BilinearSampler,
    gaussian_blur5,
    gaussian_blur5_vjp,
    normalize01,
    normalize01_vjp,
    sobel_edge_image,
    sobel_edge_image_vjp,
    spatial_gradients,
    spatial_gradients_vjp,
)

HUBER_DELTA = 0.5
TERMS = ("geo", "photo", "rs", "rp", "re")
REDUCTIONS = ("mse", "rms")


@dataclass(frozen=True)
class LossWeights:
    photo: float = 1.0
    geo: float = 0.1
    rp: float = 400.0
    re: float = 0.1
    rs: float = 0.001

    def __post_init__(self):
        if any(w < 0 for w in asdict(self).values()):
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    geo: float
    photo: float
    rs: float
    rp: float
    re: float
    total: float
    stage: str


def _norm(x: np.ndarray, reduction: str = "mse"):
    """Mean of squares (``mse``) or its root (``rms``) of ``x``, with gradient.

    The gradient at the origin is zero for both reductions.
    """
    n = x.size
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    if n == 0:
        return 0.0, np.zeros_like(x)
    ms = float(np.sum(x * x)) / n
    if reduction == "mse":
        return ms, 2.0 * x / n
    val = math.sqrt(ms)
    if val == 0.0:
        return 0.0, np.zeros_like(x)
    return val, x / (n * val)


def huber(a, delta: float = HUBER_DELTA):
    a = np.asarray(a, dtype=float)
    absa = np.abs(a)
    val = np.where(absa <= delta, 0.5 * a * a, delta * (absa - 0.5 * delta))
    grad = np.where(absa <= delta, a, delta * np.sign(a))
    return val, grad


# --------------------------------------------------------------------- regularisers


def r_smooth(depth: np.ndarray, mask: np.ndarray, reduction: str = "mse"):
    """``|| D - blur(D) ||`` over ``mask``; returns ``(value, dL/dD)``."""
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        return 0.0, np.zeros(depth.shape)
    d = np.where(mask, depth, 0.0)
    resid = d - gaussian_blur5(d, mask)
    val, g = _norm(resid[mask], reduction)
    g_img = np.zeros(depth.shape)
    g_img[mask] = g
    grad = g_img - gaussian_blur5_vjp(g_img, mask)
    return val, np.where(mask, grad, 0.0)


def r_edge(E_star: np.ndarray, E_ref: np.ndarray, x, y, reduction: str = "mse"):
    """Silhouette alignment plus vertex attraction to mono edges.

    ``x``, ``y`` are vertex positions in array coordinates (pixel centres on
    integers).  Returns ``(value, dL/dE_star, dL/dx, dL/dy)``.
    """
    diff = np.maximum(0.0, E_star) - np.maximum(0.0, E_ref)
    t1, g = _norm(diff.ravel(), reduction)
    g_E = g.reshape(E_star.shape) * (E_star > 0)
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return t1, g_E, np.zeros(0), np.zeros(0)
    smp = BilinearSampler(x, y, E_ref.shape)
    t2 = float(np.mean(smp.sample(E_ref)))
    gx, gy = smp.coord_grad(E_ref)
    return t1 + t2, g_E, gx / x.size, gy / x.size


def r_poisson(Dn_star: np.ndarray, mask: np.ndarray, D_ref: np.ndarray, E_ref: np.ndarray, reduction: str = "mse"):
    """Gradient-domain match of normalised rendered depth to the mono map.

    Differences are only taken where both neighbours are valid.
    Returns ``(value, dL/dDn_star)``.
    """
    mask = np.asarray(mask, dtype=bool) & np.isfinite(D_ref)
    w = np.maximum(0.0, E_ref)
    a = np.where(mask, Dn_star, 0.0)
    r = np.where(mask, D_ref, 0.0)
    au, av = spatial_gradients(a)
    ru, rv = spatial_gradients(r)
    mu = np.zeros_like(mask)
    mu[:, :-1] = mask[:, 1:] & mask[:, :-1]
    mv = np.zeros_like(mask)
    mv[:-1, :] = mask[1:, :] & mask[:-1, :]
    vu, gu = _norm((w * (au - ru))[mu], reduction)
    vv, gv = _norm((w * (av - rv))[mv], reduction)
    Gu = np.zeros(a.shape)
    Gv = np.zeros(a.shape)
    Gu[mu] = gu * w[mu]
    Gv[mv] = gv * w[mv]
    return vu + vv, np.where(mask, spatial_gradients_vjp(Gu, Gv), 0.0)


# --------------------------------------------------------------------- geometric


@dataclass
class ProjectedPoints:
    """Sparse points projected into the reference view (continuous pixel coords)."""

    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    shape: tuple[int, int]

    def __len__(self):
        return len(self.z)

    @property
    def sampler(self) -> BilinearSampler:
        if not hasattr(self, "_sampler"):
            self._sampler = BilinearSampler(self.u - 0.5, self.v - 0.5, self.shape)
        return self._sampler


def project_cloud(cloud: np.ndarray, view: View) -> ProjectedPoints:
    """Project world points into ``view``, dropping those behind it or off-image."""
    u, v, z = project_points(cloud, view)
    c = view.intrinsics
    ok = (z > 0) & np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= c.width) & (v >= 0) & (v <= c.height)
    return ProjectedPoints(u[ok], v[ok], z[ok], (c.height, c.width))


def l_geo_map(depth: np.ndarray, pts: ProjectedPoints, mask: np.ndarray | None = None):
    """Normalised Huber distance between a depth map and the sparse points.

    Points whose bilinear footprint touches an invalid pixel contribute zero.
    Returns ``(value, dL/dD, miss_fraction)``.
    """
    n = len(pts)
    if n == 0:
        raise ValueError("empty point cloud")
    if mask is None:
        mask = np.isfinite(depth)
    smp = pts.sampler
    hit = smp.taps_valid(mask)
    zD = smp.sample(np.where(mask, depth, 0.0))
    h, dh = huber(zD - pts.z)
    val = float(np.sum(np.where(hit, h / pts.z, 0.0))) / n
    g = np.where(hit, dh / pts.z, 0.0) / n
    return val, smp.image_vjp(g), 1.0 - hit.mean()


def coarse_point_residual(zg: np.ndarray, o: np.ndarray, s: np.ndarray, zX: np.ndarray):
    """Huber residual of the remapped depth ``zg (1 + s) + o`` at the sparse points.

    Returns ``(value, dL/do, dL/ds)`` per point; the caller chains these into the
    field parameters.
    """
    n = len(zX)
    if n == 0:
        raise ValueError("empty point cloud")
    zc = zg * (1.0 + s) + o
    h, dh = huber(zc - zX)
    val = float(np.sum(h / zX)) / n
    g = dh / zX / n
    return val, g, g * zg


def l_photo(
    I_star: np.ndarray,
    I: np.ndarray,
    D_star: np.ndarray,
    coverage: np.ndarray,
    tau: float = 0.03,
    reduction: str = "mse",
):
    """Edge-masked photometric error ``|| max(0, E*) (I* - I) ||``.

    ``mse`` averages squared errors over covered pixels and channels.  ``rms``
    takes the root of the mean, over covered pixels, of the squared colour
    distance.  Returns ``(value, dL/dI*, dL/dD*)``.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    cov = np.asarray(coverage, dtype=bool)
    zero_c = np.zeros(I_star.shape)
    zero_d = np.zeros(cov.shape)
    n = int(cov.sum())
    if n == 0:
        return 0.0, zero_c, zero_d
    Dn, _, _ = normalize01(D_star, cov)
    Dn0 = np.where(cov, Dn, 0.0)
    E = sobel_edge_image(Dn0, cov, tau)
    M = np.maximum(0.0, E) * cov
    diff = np.where(cov[..., None], I_star - I, 0.0)
    r = M[..., None] * diff
    ss = float(np.sum(r * r))
    if reduction == "mse":
        val = ss / (n * I_star.shape[-1])
        g_r = 2.0 * r / (n * I_star.shape[-1])
    else:
        val = math.sqrt(ss / n)
        if val == 0.0:
            return 0.0, zero_c, zero_d
        g_r = r / (n * val)
    g_I = M[..., None] * g_r
    g_M = np.sum(g_r * diff, axis=-1) * cov
    g_E = g_M * (E > 0)
    g_Dn = sobel_edge_image_vjp(g_E, Dn0, cov, tau)
    return val, g_I, normalize01_vjp(g_Dn, D_star, cov, detach=True)


# --------------------------------------------------------------------- total


def total_loss(terms: dict, w: LossWeights, stage: str) -> LossBreakdown:
    """Weighted sum; the photometric term only counts in the local stage."""
    if stage not in ("coarse", "local"):
        raise ValueError(f"unknown stage {stage!r}")
    vals = {t: float(terms.get(t, 0.0)) for t in TERMS}
    for t, v in vals.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term: {t}")
    photo_w = w.photo if stage == "local" else 0.0
    total = w.geo * vals["geo"] + w.rs * vals["rs"] + w.rp * vals["rp"] + w.re * vals["re"] + photo_w * vals["photo"]
    return LossBreakdown(**vals, total=total, stage=stage)


def effective_weights(w: LossWeights, stage: str) -> LossWeights:
    return w if stage == "local" else LossWeights(0.0, w.geo, w.rp, w.re, w.rs)
