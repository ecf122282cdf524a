"""Scanline-free triangle rasterisation kernel (numba)."""

import numba
import numpy as np


@numba.njit(cache=True)
def rasterize(sx, sy, zndc, w, faces, width, height):
    """Nearest-surface coverage of screen-space triangles.

    Returns per-pixel triangle ids (-1 = empty), the screen-space barycentrics of
    the winning triangle and its NDC depth.  Triangles are visited in index order
    and replace the stored fragment only when strictly nearer, so depth ties go
    to the lower index.  Shared edges follow a top-left style rule: a pixel on an
    edge belongs to the triangle for which that edge points "down" (or "left"
    when horizontal) after orienting the triangle positively.
    """
    tri = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if w[i0] <= 0.0 or w[i1] <= 0.0 or w[i2] <= 0.0:
            continue
        x0, y0 = sx[i0], sy[i0]
        x1, y1 = sx[i1], sy[i1]
        x2, y2 = sx[i2], sy[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0 or not np.isfinite(area):
            continue
        sgn = 1.0 if area > 0 else -1.0
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        # edge k is opposite vertex k; direction in the positively oriented frame
        ex0, ey0 = sgn * (x2 - x1), sgn * (y2 - y1)
        ex1, ey1 = sgn * (x0 - x2), sgn * (y0 - y2)
        ex2, ey2 = sgn * (x1 - x0), sgn * (y1 - y0)
        tl0 = ey0 > 0 or (ey0 == 0 and ex0 < 0)
        tl1 = ey1 > 0 or (ey1 == 0 and ex1 < 0)
        tl2 = ey2 > 0 or (ey2 == 0 and ex2 < 0)
        z0, z1, z2 = zndc[i0], zndc[i1], zndc[i2]
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                e0 = (x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)
                e1 = (x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)
                e2 = (x0 - cx) * (y1 - cy) - (x1 - cx) * (y0 - cy)
                s0, s1, s2 = sgn * e0, sgn * e1, sgn * e2
                if s0 < 0 or s1 < 0 or s2 < 0:
                    continue
                if (s0 == 0 and not tl0) or (s1 == 0 and not tl1) or (s2 == 0 and not tl2):
                    continue
                b0, b1, b2 = e0 / area, e1 / area, e2 / area
                z = b0 * z0 + b1 * z1 + b2 * z2
                if z < -1.0 or z > 1.0:
                    continue
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    tri[py, px] = f
                    bary[py, px, 0] = b0
                    bary[py, px, 1] = b1
                    bary[py, px, 2] = b2
    return tri, bary, zbuf
