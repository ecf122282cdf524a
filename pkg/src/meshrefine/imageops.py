"""Image-space primitives with explicit vector-Jacobian products.

Every filter here is linear (or a pointwise map of linear filters), so each
forward function has a matching ``*_vjp`` that applies the adjoint.  Borders use
replicate padding, implemented as sparse 1D operators so the adjoint is exact.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

SOBEL_SMOOTH = (1.0, 2.0, 1.0)
SOBEL_DIFF = (-1.0, 0.0, 1.0)
FLAT_RTOL = 1e-9  # relative range below which a map counts as constant


def gaussian_kernel5(sigma: float = 1.0) -> np.ndarray:
    t = np.arange(-2, 3, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=64)
def _replicate_operator(n: int, taps: tuple) -> sp.csr_matrix:
    """``(A x)[i] = sum_t taps[t] * x[clamp(i + t - r)]`` as a sparse matrix."""
    r = len(taps) // 2
    rows, cols, vals = [], [], []
    for t, k in enumerate(taps):
        if k == 0:
            continue
        rows.append(np.arange(n))
        cols.append(np.clip(np.arange(n) + t - r, 0, n - 1))
        vals.append(np.full(n, k))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    A.sum_duplicates()
    return A


def _sep(img: np.ndarray, row_taps: tuple, col_taps: tuple) -> np.ndarray:
    """Separable filter: ``row_taps`` run along axis 0, ``col_taps`` along axis 1."""
    h, w = img.shape
    Ar = _replicate_operator(h, row_taps)
    Ac = _replicate_operator(w, col_taps)
    return np.asarray((Ac @ (Ar @ img).T).T)


def _sep_adjoint(g: np.ndarray, row_taps: tuple, col_taps: tuple) -> np.ndarray:
    h, w = g.shape
    Ar = _replicate_operator(h, row_taps)
    Ac = _replicate_operator(w, col_taps)
    return np.asarray(Ar.T @ (Ac.T @ g.T).T)


# --------------------------------------------------------------------- blur


def gaussian_blur5(img: np.ndarray, mask: np.ndarray | None = None, sigma: float = 1.0) -> np.ndarray:
    """5-tap Gaussian blur that averages only over valid pixels.

    Pixels whose whole window is invalid come back as NaN.
    """
    img = np.asarray(img, dtype=float)
    mask = np.ones(img.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    k = tuple(gaussian_kernel5(sigma))
    m = mask.astype(float)
    num = _sep(np.where(mask, img, 0.0), k, k)
    den = _sep(m, k, k)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


def gaussian_blur5_vjp(g: np.ndarray, mask: np.ndarray | None = None, sigma: float = 1.0) -> np.ndarray:
    g = np.nan_to_num(np.asarray(g, dtype=float))
    mask = np.ones(g.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    k = tuple(gaussian_kernel5(sigma))
    den = _sep(mask.astype(float), k, k)
    with np.errstate(invalid="ignore", divide="ignore"):
        hh = np.where(den > 0, g / den, 0.0)
    return np.where(mask, _sep_adjoint(hh, k, k), 0.0)


# --------------------------------------------------------------------- sobel edges


def _invalid_neighbourhood(mask: np.ndarray) -> np.ndarray:
    """True where the 3x3 (replicate-padded) window contains an invalid pixel."""
    bad = ~mask
    p = np.pad(bad, 1, mode="edge")
    h, w = mask.shape
    out = np.zeros_like(bad)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy : dy + h, dx : dx + w]
    return out


def sobel_response(img: np.ndarray, mask: np.ndarray):
    x = np.where(mask, img, 0.0)
    gx = _sep(x, SOBEL_SMOOTH, SOBEL_DIFF)
    gy = _sep(x, SOBEL_DIFF, SOBEL_SMOOTH)
    return gx, gy


def sobel_edge_image(img: np.ndarray, mask: np.ndarray | None = None, tau: float = 0.03) -> np.ndarray:
    """Edge image in [-1, 1]: ``clamp(1 - |sobel| / tau)``; -1 marks edges.

    Pixels whose 3x3 window touches an invalid pixel are set to -1.
    """
    if not tau > 0:
        raise ValueError("edge threshold must be positive")
    img = np.asarray(img, dtype=float)
    mask = np.ones(img.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    gx, gy = sobel_response(img, mask)
    e = np.clip(1.0 - np.hypot(gx, gy) / tau, -1.0, 1.0)
    e[_invalid_neighbourhood(mask)] = -1.0
    return e


def sobel_edge_image_vjp(g: np.ndarray, img: np.ndarray, mask: np.ndarray | None = None, tau: float = 0.03):
    img = np.asarray(img, dtype=float)
    mask = np.ones(img.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    gx, gy = sobel_response(img, mask)
    mag = np.hypot(gx, gy)
    lin = 1.0 - mag / tau
    active = (lin > -1.0) & (lin < 1.0) & ~_invalid_neighbourhood(mask) & (mag > 0)
    gm = np.where(active, -np.asarray(g, dtype=float) / tau, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ggx = np.where(active, gm * gx / mag, 0.0)
        ggy = np.where(active, gm * gy / mag, 0.0)
    out = _sep_adjoint(ggx, SOBEL_SMOOTH, SOBEL_DIFF) + _sep_adjoint(ggy, SOBEL_DIFF, SOBEL_SMOOTH)
    return np.where(mask, out, 0.0)


# --------------------------------------------------------------------- gradients


def spatial_gradients(img: np.ndarray):
    """Forward differences; the last column (u) / last row (v) is zero."""
    img = np.asarray(img, dtype=float)
    gu = np.zeros_like(img)
    gv = np.zeros_like(img)
    gu[:, :-1] = img[:, 1:] - img[:, :-1]
    gv[:-1, :] = img[1:, :] - img[:-1, :]
    return gu, gv


def spatial_gradients_vjp(g_u: np.ndarray, g_v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(g_u, dtype=float)
    out[:, 1:] += g_u[:, :-1]
    out[:, :-1] -= g_u[:, :-1]
    out[1:, :] += g_v[:-1, :]
    out[:-1, :] -= g_v[:-1, :]
    return out


# --------------------------------------------------------------------- normalisation


def normalize01(depth: np.ndarray, mask: np.ndarray | None = None):
    """Min-max normalise valid pixels to [0, 1].

    Returns ``(normalised, scale, ok)`` where ``scale = 1 / (max - min)`` is the
    (detached) derivative of the map.  A constant input gives all 0.5 with
    ``ok = False`` and ``scale = 0``; so does a range below ``FLAT_RTOL`` of the
    magnitude, which is rounding noise.  Invalid pixels are NaN.
    """
    depth = np.asarray(depth, dtype=float)
    if mask is None:
        mask = np.isfinite(depth)
    mask = np.asarray(mask, dtype=bool)
    out = np.full(depth.shape, np.nan)
    if not np.any(mask):
        return out, 0.0, False
    vals = depth[mask]
    lo, hi = vals.min(), vals.max()
    if not hi - lo > FLAT_RTOL * max(abs(lo), abs(hi)):
        out[mask] = 0.5
        return out, 0.0, False
    # divide rather than multiply by the reciprocal so the maximum maps to exactly 1
    out[mask] = (vals - lo) / (hi - lo)
    return out, 1.0 / (hi - lo), True


def normalize01_vjp(g: np.ndarray, depth: np.ndarray, mask: np.ndarray | None = None, detach: bool = True):
    """Pull a cotangent on :func:`normalize01`'s output back onto ``depth``.

    With ``detach`` the extrema are constants and the map is a plain rescale.
    Otherwise the arg-min and arg-max pixels receive the exact derivative as
    well, which makes the result orthogonal to affine changes of ``depth``.
    """
    depth = np.asarray(depth, dtype=float)
    if mask is None:
        mask = np.isfinite(depth)
    mask = np.asarray(mask, dtype=bool)
    Dn, scale, ok = normalize01(depth, mask)
    g = np.where(mask, np.nan_to_num(np.asarray(g, dtype=float)), 0.0)
    out = g * scale
    if not ok or detach:
        return out
    idx = np.flatnonzero(mask.ravel())
    vals = depth.ravel()[idx]
    lo, hi = idx[np.argmin(vals)], idx[np.argmax(vals)]
    dn = np.where(mask, Dn, 0.0)
    flat = out.ravel()
    flat[lo] -= scale * float(np.sum(g * (1.0 - dn)))
    flat[hi] -= scale * float(np.sum(g * dn))
    return flat.reshape(depth.shape)


# --------------------------------------------------------------------- sampling


class BilinearSampler:
    """Bilinear lookups at fixed array coordinates (pixel centres on integers).

    Coordinates are clamped to ``[0, W-1] x [0, H-1]``; the coordinate derivative
    is zero where clamping is active.
    """

    def __init__(self, x, y, shape):
        h, w = shape
        self.shape = (h, w)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xc = np.clip(x, 0.0, w - 1.0)
        yc = np.clip(y, 0.0, h - 1.0)
        self.x_free = (x == xc).astype(float)
        self.y_free = (y == yc).astype(float)
        x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
        y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        self.fx = xc - x0
        self.fy = yc - y0
        self.idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
        fx, fy = self.fx, self.fy
        self.weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)

    def taps_valid(self, mask: np.ndarray) -> np.ndarray:
        return np.asarray(mask, dtype=bool).ravel()[self.idx].all(axis=-1)

    def sample(self, img: np.ndarray) -> np.ndarray:
        vals = np.asarray(img, dtype=float).ravel()[self.idx]
        return np.sum(vals * self.weights, axis=-1)

    def image_vjp(self, g: np.ndarray) -> np.ndarray:
        h, w = self.shape
        contrib = (np.asarray(g, dtype=float)[..., None] * self.weights).ravel()
        return np.bincount(self.idx.ravel(), contrib, minlength=h * w).reshape(h, w)

    def coord_grad(self, img: np.ndarray):
        """Partials ``(d value / dx, d value / dy)`` at every sample."""
        v = np.asarray(img, dtype=float).ravel()[self.idx]
        dx = (1 - self.fy) * (v[..., 1] - v[..., 0]) + self.fy * (v[..., 3] - v[..., 2])
        dy = (1 - self.fx) * (v[..., 2] - v[..., 0]) + self.fx * (v[..., 3] - v[..., 1])
        return dx * self.x_free, dy * self.y_free


def bilinear_sample(img: np.ndarray, x, y) -> np.ndarray:
    """Bilinear interpolation of ``img`` at array coordinates ``(x, y)``."""
    return BilinearSampler(x, y, np.asarray(img).shape[:2]).sample(img)
