"""Depth map -> triangle mesh in reciprocal clip space, and quadric decimation."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Intrinsics, near_far, pixel_to_ndc, to_reciprocal

FZ_BOUNDS = (0.05, 20.0)


@dataclass
class DepthMesh:
    """Triangle mesh whose vertices live in the reference camera's clip space.

    ``ndc`` holds the base ``(u', v')`` and ``zr`` the base reciprocal depth ``z'``
    of every vertex.  ``du``, ``dv`` (NDC units) and ``fz`` (inverse depth scale)
    are the per-vertex parameters refined by the optimiser.
    """

    ndc: np.ndarray
    zr: np.ndarray
    colors: np.ndarray
    faces: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    fz: np.ndarray
    d: int
    width: int
    height: int
    P: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.zr)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def delta_bounds(self) -> tuple[float, float]:
        """Box limits for ``du`` and ``dv``: half a grid cell, in NDC units."""
        return self.d / self.width, self.d / self.height

    def positions(self) -> np.ndarray:
        """Current clip-space positions ``(u' + du, v' + dv, z')`` as an ``(N, 3)`` array."""
        return np.column_stack([self.ndc[:, 0] + self.du, self.ndc[:, 1] + self.dv, self.zr])

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates of the (displaced) vertices."""
        u = (self.ndc[:, 0] + self.du + 1.0) * self.width / 2.0
        v = (self.ndc[:, 1] + self.dv + 1.0) * self.height / 2.0
        return u, v

    def linear_depth(self) -> np.ndarray:
        """Base linear depth of every vertex (ignores ``fz``)."""
        near, far = near_far(self.P)
        return 2.0 * far * near / ((far + near) - self.zr * (far - near))

    def camera_points(self) -> np.ndarray:
        """Vertices in the reference OpenGL camera frame with the current parameters applied."""
        from .rasterizer import apply_vertex_params

        return apply_vertex_params(self, None, None, self.P).points

    def copy(self) -> "DepthMesh":
        return replace(
            self,
            ndc=self.ndc.copy(),
            zr=self.zr.copy(),
            colors=self.colors.copy(),
            faces=self.faces.copy(),
            du=self.du.copy(),
            dv=self.dv.copy(),
            fz=self.fz.copy(),
        )

    def subset(self, keep: np.ndarray, faces: np.ndarray) -> "DepthMesh":
        """Mesh restricted to vertices ``keep``; ``faces`` index the original vertices."""
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        new_faces = remap[faces].reshape(-1, 3)
        if np.any(new_faces < 0):
            raise ValueError("face references a dropped vertex")
        return replace(
            self,
            ndc=self.ndc[keep],
            zr=self.zr[keep],
            colors=self.colors[keep],
            faces=new_faces,
            du=self.du[keep],
            dv=self.dv[keep],
            fz=self.fz[keep],
        )

    def check(self) -> None:
        """Raise ``ValueError`` if a structural invariant is violated."""
        bu, bv = self.delta_bounds
        if np.any(np.abs(self.du) > bu) or np.any(np.abs(self.dv) > bv):
            raise ValueError("vertex offset outside its box")
        if np.any(self.fz < FZ_BOUNDS[0]) or np.any(self.fz > FZ_BOUNDS[1]):
            raise ValueError("fz outside [0.05, 20]")
        if np.any(np.abs(self.zr) > 1.0):
            raise ValueError("reciprocal depth outside [-1, 1]")
        f = self.faces
        if len(f):
            if f.min() < 0 or f.max() >= self.n_vertices:
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face with repeated vertex")
            if np.any(signed_areas(self.ndc, f) == 0):
                raise ValueError("degenerate face")


def signed_areas(uv: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Twice the signed area of each face in the 2D coordinates ``uv``."""
    a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])


def unproject(u, v, z, c: Intrinsics) -> np.ndarray:
    """Back-project pixel ``(u, v)`` at linear depth ``z`` into the OpenGL camera frame.

    The returned frame looks down ``-z`` with ``y`` up, so the vision-convention
    ``y = (v - cy) z / fy`` appears with flipped sign.
    """
    u, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, z)))
    if np.any(~(z > 0)):
        raise ValueError("unproject requires positive depth")
    x = (u - c.cx) * z / c.fx
    y = (v - c.cy) * z / c.fy
    return np.stack([x, -y, -z], axis=-1)


def _bilinear_valid(img: np.ndarray, valid: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear lookup at array coordinates that ignores invalid taps.

    Returns the renormalised value and whether any tap was valid.
    """
    h, w = valid.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    taps = [(y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)), (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)]
    extra = img.shape[2:] if img.ndim == 3 else ()
    acc = np.zeros(x.shape + extra)
    wsum = np.zeros(x.shape)
    any_valid = np.zeros(x.shape, dtype=bool)
    for yy, xx, wt in taps:
        ok = valid[yy, xx]
        wt = np.where(ok, wt, 0.0)
        vals = np.where(ok.reshape(ok.shape + (1,) * len(extra)), img[yy, xx], 0.0)
        acc += vals * wt.reshape(wt.shape + (1,) * len(extra))
        wsum += wt
        any_valid |= ok
    # a valid tap may carry zero weight (sample exactly on a pixel row/column)
    tiny = wsum <= 0
    if np.any(tiny & any_valid):
        for yy, xx, _ in taps:
            ok = valid[yy, xx] & tiny
            acc[ok] += img[yy, xx][ok]
            wsum[ok] += 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = acc / wsum.reshape(wsum.shape + (1,) * len(extra))
    return out, any_valid


def build_depth_mesh(depth: np.ndarray, image: np.ndarray, c: Intrinsics, d: int, P: np.ndarray) -> DepthMesh:
    """Mesh an absolute depth map on a grid downsampled by ``d``.

    Samples sit at pixel positions ``i*d + d/2`` (clamped to the image).  Each grid
    cell is split along the diagonal whose end points differ least in depth.
    Depths are clamped to the projection's ``[near, far]`` range.
    """
    if int(d) != d or d < 1:
        raise ValueError("downsample factor must be a positive integer")
    d = int(d)
    depth = np.asarray(depth, dtype=float)
    H, W = depth.shape
    if (W, H) != (c.width, c.height) or image.shape[:2] != (H, W):
        raise ValueError("depth, image and intrinsics sizes differ")
    near, far = near_far(P)
    gw, gh = math.ceil(W / d), math.ceil(H / d)
    us = np.minimum(np.arange(gw) * d + d / 2.0, W)
    vs = np.minimum(np.arange(gh) * d + d / 2.0, H)
    U, V = np.meshgrid(us, vs)  # (gh, gw)

    valid = np.isfinite(depth) & (depth > 0)
    z, ok = _bilinear_valid(np.where(valid, depth, 0.0), valid, U - 0.5, V - 0.5)
    col, _ = _bilinear_valid(np.asarray(image, dtype=float), np.ones_like(valid), U - 0.5, V - 0.5)
    z = np.clip(np.where(ok, z, np.nan), near, far)

    idx = np.arange(gw * gh).reshape(gh, gw)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    cc, e = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    zf = z.ravel()
    with np.errstate(invalid="ignore"):
        d_ae = np.abs(zf[a] - zf[e])
        d_bc = np.abs(zf[b] - zf[cc])
    use_ae = ~(np.nan_to_num(d_ae, nan=np.inf) > np.nan_to_num(d_bc, nan=np.inf))
    f1 = np.where(use_ae[:, None], np.column_stack([a, b, e]), np.column_stack([a, b, cc]))
    f2 = np.where(use_ae[:, None], np.column_stack([a, e, cc]), np.column_stack([b, e, cc]))
    faces = np.stack([f1, f2], axis=1).reshape(-1, 3)

    okf = ok.ravel()
    faces = faces[okf[faces].all(axis=1)]
    keep = np.flatnonzero(okf)
    remap = np.full(gw * gh, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    faces = remap[faces]

    un, vn = pixel_to_ndc(U.ravel()[keep], V.ravel()[keep], W, H)
    n = len(keep)
    return DepthMesh(
        ndc=np.column_stack([un, vn]),
        zr=to_reciprocal(zf[keep], near, far),
        colors=col.reshape(-1, 3)[keep],
        faces=faces.astype(np.int64).reshape(-1, 3),
        du=np.zeros(n),
        dv=np.zeros(n),
        fz=np.ones(n),
        d=d,
        width=W,
        height=H,
        P=np.asarray(P, dtype=float),
    )


# --------------------------------------------------------------------- decimation


def _plane_quadric(p0, p1, p2) -> np.ndarray:
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm == 0:
        return np.zeros((4, 4))
    n = n / norm
    plane = np.append(n, -n @ p0)
    return np.outer(plane, plane)


@dataclass
class DecimationResult:
    mesh: DepthMesh
    kept: np.ndarray
    costs: np.ndarray


def decimate(mesh: DepthMesh, r: float, return_info: bool = False):
    """Quadric edge-collapse decimation with subset placement.

    A collapse ``a -> b`` deletes ``a`` and reconnects its faces to ``b``; no
    position is ever moved, so surviving vertices keep their stored values bit for
    bit.  Mesh-boundary vertices are never deleted.  Collapses that would flip or
    degenerate a face in ``(u', v')`` or break the link condition are skipped.
    Stops at ``ceil(r * N)`` vertices or when no legal collapse remains.
    """
    if not 0 < r <= 1:
        raise ValueError("keep ratio must be in (0, 1]")
    n = mesh.n_vertices
    target = math.ceil(r * n)
    if r == 1 or n <= target:
        out = mesh.copy()
        info = DecimationResult(out, np.arange(n), np.zeros(0))
        return info if return_info else out

    pos = mesh.positions()
    uv = pos[:, :2]
    faces = mesh.faces.copy()
    face_alive = np.ones(len(faces), dtype=bool)
    vfaces: list[set[int]] = [set() for _ in range(n)]
    for fi, f in enumerate(faces):
        for v in f:
            vfaces[v].add(fi)

    edge_count: dict[tuple[int, int], int] = {}
    for f in faces:
        for i in range(3):
            e = (min(f[i], f[(i + 1) % 3]), max(f[i], f[(i + 1) % 3]))
            edge_count[e] = edge_count.get(e, 0) + 1
    boundary = np.zeros(n, dtype=bool)
    for (a, b), cnt in edge_count.items():
        if cnt == 1:
            boundary[a] = boundary[b] = True
    # isolated vertices have no faces; treat them as pinned
    for v in range(n):
        if not vfaces[v]:
            boundary[v] = True

    Q = np.zeros((n, 4, 4))
    for f in faces:
        K = _plane_quadric(pos[f[0]], pos[f[1]], pos[f[2]])
        Q[f[0]] += K
        Q[f[1]] += K
        Q[f[2]] += K
    hom = np.column_stack([pos, np.ones(n)])

    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    heap: list = []

    def neighbours(v):
        out = set()
        for fi in vfaces[v]:
            out.update(int(x) for x in faces[fi])
        out.discard(v)
        return out

    def push_edges(v):
        for w in neighbours(v):
            for a, b in ((v, w), (w, v)):
                if boundary[a]:
                    continue
                qa = Q[a] + Q[b]
                cost = float(hom[b] @ qa @ hom[b])
                heapq.heappush(heap, (cost, a, b, int(version[a]), int(version[b])))

    def legal(a, b):
        shared = [fi for fi in vfaces[a] if b in faces[fi]]
        if not shared:
            return False
        if len(neighbours(a) & neighbours(b)) != len(shared):
            return False
        for fi in vfaces[a]:
            f = faces[fi]
            if b in f:
                continue
            g = np.where(f == a, b, f)
            area = (uv[g[1], 0] - uv[g[0], 0]) * (uv[g[2], 1] - uv[g[0], 1]) - (uv[g[2], 0] - uv[g[0], 0]) * (
                uv[g[1], 1] - uv[g[0], 1]
            )
            if not area > 0:
                return False
        return True

    for v in range(n):
        if not boundary[v]:
            push_edges(v)

    count = n
    costs = []
    while count > target and heap:
        cost, a, b, va, vb = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
            continue
        if not legal(a, b):
            continue
        for fi in list(vfaces[a]):
            f = faces[fi]
            if b in f:
                face_alive[fi] = False
                for v in f:
                    vfaces[v].discard(fi)
            else:
                f[f == a] = b
                vfaces[b].add(fi)
        vfaces[a].clear()
        alive[a] = False
        Q[b] += Q[a]
        count -= 1
        costs.append(cost)
        touched = neighbours(b) | {b}
        for v in touched:
            version[v] += 1
        for v in touched:
            push_edges(v)

    kept = np.flatnonzero(alive)
    out = mesh.subset(kept, faces[face_alive])
    info = DecimationResult(out, kept, np.array(costs))
    return info if return_info else out
