"""Random-configuration finite-difference checks for the field, image operators and losses.

Each checker draws one configuration from its seed and returns the worst relative
error between the analytic cotangent and central differences.
"""

import numpy as np

from conftest import central_fd, rel_err
from meshrefine.field import CoarseField, FieldConfig, field_init
from meshrefine.imageops import (
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
from meshrefine.losses import ProjectedPoints, coarse_point_residual, l_geo_map, l_photo, r_edge, r_poisson, r_smooth


def _smooth_image(rng, h, w, amp=1.0):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c = rng.normal(size=6)
    return 2.0 + amp * (c[0] * xx + c[1] * yy + c[2] * xx * yy + 0.5 * np.sin(3 * c[3] * xx + c[4] * yy + c[5]))


def _mask(rng, h, w, p=0.15):
    m = rng.random((h, w)) > p
    m[1:-1, 1:-1] |= rng.random((h - 2, w - 2)) > 0.5
    return m


# --------------------------------------------------------------------- field


def field_error(seed):
    rng = np.random.default_rng(seed)
    mode = "mlp" if rng.random() < 0.8 else "global-affine"
    cfg = FieldConfig(mode, layers=int(rng.integers(1, 4)), width=int(rng.integers(3, 9)),
                      m=int(rng.integers(0, 4)), k=int(rng.integers(0, 4)))
    f = field_init(cfg, seed)
    if mode == "global-affine":
        f = CoarseField(cfg, [rng.normal(size=2)])
    n = int(rng.integers(3, 10))
    u, v, z = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(0, 1, n)
    go, gs = rng.normal(size=n), rng.normal(size=n)
    _, _, cache = f.forward(u, v, z)
    grads, g_in = f.backward(cache, go, gs, inputs=True)

    def scalar(params, uu, vv, zz):
        o, s = CoarseField(cfg, params)(uu, vv, zz)
        return float(np.sum(go * o + gs * s))

    worst = 0.0
    for k in range(len(f.params)):
        def fk(p, k=k):
            ps = list(f.params)
            ps[k] = p
            return scalar(ps, u, v, z)
        worst = max(worst, rel_err(grads[k], central_fd(fk, f.params[k])))
    if mode == "mlp":
        worst = max(worst, rel_err(g_in[0], central_fd(lambda x: scalar(f.params, x, v, z), u)))
        worst = max(worst, rel_err(g_in[1], central_fd(lambda x: scalar(f.params, u, x, z), v)))
        worst = max(worst, rel_err(g_in[2], central_fd(lambda x: scalar(f.params, u, v, x), z)))
    return worst


# --------------------------------------------------------------------- image operators


def imageops_error(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(5, 11)), int(rng.integers(5, 11))
    kind = ("blur", "sobel", "gradients", "normalize", "bilinear")[seed % 5]
    g = rng.normal(size=(h, w))
    if kind == "blur":
        mask = _mask(rng, h, w)
        x0 = rng.normal(size=(h, w))
        an = gaussian_blur5_vjp(g, mask)
        fd = central_fd(lambda x: float(np.sum(g * gaussian_blur5(x, mask))), x0)
        return rel_err(np.where(mask, an, 0.0), np.where(mask, fd, 0.0))
    if kind == "sobel":
        # tau larger than the response keeps every pixel on the linear branch
        x0 = _smooth_image(rng, h, w, 0.3)
        mask = np.ones((h, w), dtype=bool)
        tau = 4.0
        an = sobel_edge_image_vjp(g, x0, mask, tau)
        fd = central_fd(lambda x: float(np.sum(g * sobel_edge_image(x, mask, tau))), x0)
        return rel_err(an, fd)
    if kind == "gradients":
        gv = rng.normal(size=(h, w))
        an = spatial_gradients_vjp(g, gv)

        def f(x):
            a, b = spatial_gradients(x)
            return float(np.sum(g * a + gv * b))
        return rel_err(an, central_fd(f, rng.normal(size=(h, w))))
    if kind == "normalize":
        mask = _mask(rng, h, w)
        x0 = rng.normal(size=(h, w))
        an = normalize01_vjp(g, x0, mask, detach=False)
        fd = central_fd(lambda x: float(np.sum(np.where(mask, g * normalize01(x, mask)[0], 0.0))), x0)
        return rel_err(an, fd)
    n = int(rng.integers(3, 12))
    x = rng.uniform(0.05, w - 1.05, n)
    y = rng.uniform(0.05, h - 1.05, n)
    x = np.where(np.abs(x - np.round(x)) < 0.05, x + 0.1, x)
    y = np.where(np.abs(y - np.round(y)) < 0.05, y + 0.1, y)
    img = rng.normal(size=(h, w))
    gs = rng.normal(size=n)
    smp = BilinearSampler(x, y, (h, w))
    e1 = rel_err(smp.image_vjp(gs), central_fd(lambda im: float(gs @ BilinearSampler(x, y, (h, w)).sample(im)), img))
    dx, dy = smp.coord_grad(img)
    e2 = rel_err(gs * dx, central_fd(lambda t: float(gs @ BilinearSampler(t, y, (h, w)).sample(img)), x))
    e3 = rel_err(gs * dy, central_fd(lambda t: float(gs @ BilinearSampler(x, t, (h, w)).sample(img)), y))
    return max(e1, e2, e3)


# --------------------------------------------------------------------- losses


def _away_from_zero(a, eps=0.05):
    return np.where(np.abs(a) < eps, np.sign(a + 1e-300) * eps + a, a)


def loss_error(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(6, 11)), int(rng.integers(6, 11))
    reduction = ("mse", "rms")[int(rng.integers(2))]
    kind = ("smooth", "edge", "poisson", "geo", "coarse", "photo")[seed % 6]
    if kind == "smooth":
        mask = _mask(rng, h, w)
        d0 = rng.uniform(1, 3, (h, w))
        val, an = r_smooth(d0, mask, reduction)
        fd = central_fd(lambda x: r_smooth(x, mask, reduction)[0], d0)
        return rel_err(an, np.where(mask, fd, 0.0))
    if kind == "edge":
        E_ref = rng.uniform(-1, 1, (h, w))
        E0 = _away_from_zero(rng.uniform(-1, 1, (h, w)))
        n = int(rng.integers(2, 8))
        x = rng.uniform(0.1, w - 1.1, n)
        y = rng.uniform(0.1, h - 1.1, n)
        x = np.where(np.abs(x - np.round(x)) < 0.05, x + 0.1, x)
        y = np.where(np.abs(y - np.round(y)) < 0.05, y + 0.1, y)
        _, gE, gx, gy = r_edge(E0, E_ref, x, y, reduction)
        e1 = rel_err(gE, central_fd(lambda e: r_edge(e, E_ref, x, y, reduction)[0], E0))
        e2 = rel_err(gx, central_fd(lambda t: r_edge(E0, E_ref, t, y, reduction)[0], x))
        e3 = rel_err(gy, central_fd(lambda t: r_edge(E0, E_ref, x, t, reduction)[0], y))
        return max(e1, e2, e3)
    if kind == "poisson":
        mask = _mask(rng, h, w)
        Dn = rng.random((h, w))
        Dr = rng.random((h, w))
        Er = rng.uniform(-0.5, 1, (h, w))
        _, an = r_poisson(Dn, mask, Dr, Er, reduction)
        fd = central_fd(lambda x: r_poisson(x, mask, Dr, Er, reduction)[0], Dn)
        return rel_err(an, np.where(mask, fd, 0.0))
    if kind == "geo":
        n = int(rng.integers(3, 15))
        depth = rng.uniform(1, 3, (h, w))
        u = rng.uniform(0.7, w - 0.7, n)
        v = rng.uniform(0.7, h - 0.7, n)
        u = np.where(np.abs(u - 0.5 - np.round(u - 0.5)) < 0.05, u + 0.1, u)
        v = np.where(np.abs(v - 0.5 - np.round(v - 0.5)) < 0.05, v + 0.1, v)
        z = rng.uniform(1, 3, n) + rng.choice([0.0, 1.5], n)
        pts = ProjectedPoints(u, v, z, (h, w))
        mask = _mask(rng, h, w, 0.05)
        _, an, _ = l_geo_map(depth, pts, mask)

        def f(x):
            return l_geo_map(x, ProjectedPoints(u, v, z, (h, w)), mask)[0]
        return rel_err(np.where(mask, an, 0.0), np.where(mask, central_fd(f, depth), 0.0))
    if kind == "coarse":
        n = int(rng.integers(2, 12))
        zg, zX = rng.uniform(1, 3, n), rng.uniform(1, 3, n)
        o, s = rng.normal(0, 0.3, n), rng.normal(0, 0.3, n)
        _, go, gs = coarse_point_residual(zg, o, s, zX)
        e1 = rel_err(go, central_fd(lambda t: coarse_point_residual(zg, t, s, zX)[0], o))
        e2 = rel_err(gs, central_fd(lambda t: coarse_point_residual(zg, o, t, zX)[0], s))
        return max(e1, e2)
    # photometric: linear branch of the edge clamp via a large tau; the depth
    # path has detached extrema, so only non-extremal pixels are perturbed
    D = _smooth_image(rng, h, w, 0.5)
    cov = _mask(rng, h, w, 0.05)
    I_star, I = rng.random((h, w, 3)), rng.random((h, w, 3))
    tau = 4.0
    _, gI, gD = l_photo(I_star, I, D, cov, tau, reduction)
    e1 = rel_err(gI, central_fd(lambda x: l_photo(x, I, D, cov, tau, reduction)[0], I_star))
    fd = central_fd(lambda x: l_photo(I_star, I, x, cov, tau, reduction)[0], D)
    vals = np.where(cov, D, np.nan)
    free = cov & (D != np.nanmin(vals)) & (D != np.nanmax(vals))
    e2 = rel_err(np.where(free, gD, 0.0), np.where(free, fd, 0.0))
    return max(e1, e2)
