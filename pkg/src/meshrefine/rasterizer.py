"""Differentiable projection and rasterisation of a depth mesh.

Forward: per-vertex parameters -> reference clip positions -> target-view clip
positions -> coverage, perspective-correct barycentrics, colour and linear depth.
Backward: cotangents on colour/depth images -> exact partials w.r.t. ``du``,
``dv``, ``fz`` and the coarse-field outputs ``(o, s)``.  Visibility (which
triangle owns a pixel) is piecewise constant and carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._raster import rasterize
from .core import View, gl_relative_transform, near_far, projection_from_intrinsics
from .meshing import DepthMesh

CLAMP_EPS = 1e-6


@dataclass
class VertexParamGrads:
    du: np.ndarray
    dv: np.ndarray
    fz: np.ndarray
    o: np.ndarray
    s: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "VertexParamGrads":
        return cls(*(np.zeros(n) for _ in range(5)))

    def __iadd__(self, other: "VertexParamGrads"):
        for name in ("du", "dv", "fz", "o", "s"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, k: float) -> "VertexParamGrads":
        return VertexParamGrads(self.du * k, self.dv * k, self.fz * k, self.o * k, self.s * k)


@dataclass
class VertexPositions:
    """Output of :func:`apply_vertex_params` together with what its backward needs."""

    clip: np.ndarray  # (N, 4) reference clip positions
    points: np.ndarray  # (N, 3) reference OpenGL camera positions
    P0: np.ndarray
    _X: np.ndarray = field(repr=False)
    _J: np.ndarray = field(repr=False)  # (N, 3, 2) dX / d(du, dv)
    _zlin: np.ndarray = field(repr=False)
    _k: np.ndarray = field(repr=False)
    _c: np.ndarray = field(repr=False)
    _dc: np.ndarray = field(repr=False)
    _o: np.ndarray = field(repr=False)
    _s: np.ndarray = field(repr=False)
    _fz: np.ndarray = field(repr=False)

    @property
    def depth(self) -> np.ndarray:
        return -self.points[:, 2]

    def backward_points(self, g_points: np.ndarray) -> VertexParamGrads:
        """Chain ``dL/dpoints`` back to the vertex parameters."""
        X, k, c = self._X, self._k, self._c
        X2 = X * k[:, None]
        # X3 = c(z2) X2 with z2 = -X2_z
        g2 = g_points * c[:, None]
        g2[:, 2] -= np.einsum("ij,ij->i", g_points, X2) * self._dc
        gk = np.einsum("ij,ij->i", g2, X)
        gX = g2 * k[:, None]
        zl, fz, o = self._zlin, self._fz, self._o
        # k = ((1 + s) + o / zlin) / fz, zlin = -X_z
        gX[:, 2] += gk * (o / (zl * zl * fz))
        g_du = np.einsum("ij,ij->i", gX, self._J[:, :, 0])
        g_dv = np.einsum("ij,ij->i", gX, self._J[:, :, 1])
        return VertexParamGrads(
            du=g_du,
            dv=g_dv,
            fz=-gk * k / fz,
            o=gk / (zl * fz),
            s=gk / fz,
        )

    def backward(self, g_clip: np.ndarray) -> VertexParamGrads:
        """Chain ``dL/dclip`` (N, 4) back to the vertex parameters."""
        return self.backward_points(g_clip @ self.P0[:, :3])


def apply_vertex_params(mesh: DepthMesh, o, s, P0: np.ndarray) -> VertexPositions:
    """Map vertex parameters and coarse-field outputs to reference clip positions.

    The displaced vertex ``(u'+du, v'+dv, z')`` is unprojected to the camera, moved
    along its ray to linear depth ``(z (1 + s) + o) / fz`` and then pulled back
    inside ``[near + eps, far - eps]``.  ``o`` and ``s`` may be None (zero).
    """
    n = mesh.n_vertices
    o = np.zeros(n) if o is None else np.broadcast_to(np.asarray(o, dtype=float), (n,))
    s = np.zeros(n) if s is None else np.broadcast_to(np.asarray(s, dtype=float), (n,))
    fz = mesh.fz
    Pinv = np.linalg.inv(P0)
    near, far = near_far(P0)

    ndc = np.column_stack([mesh.ndc[:, 0] + mesh.du, mesh.ndc[:, 1] + mesh.dv, mesh.zr, np.ones(n)])
    h = ndc @ Pinv.T
    hw = h[:, 3]
    X = h[:, :3] / hw[:, None]
    # dX/dh = [I / hw, -X / hw]; d h / d(du, dv) = Pinv[:, 0:2]
    J = (Pinv[None, :3, :2] - X[:, :, None] * Pinv[None, 3:4, :2]) / hw[:, None, None]

    zlin = -X[:, 2]
    k = ((1.0 + s) + o / zlin) / fz
    X2 = X * k[:, None]
    z2 = -X2[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        r_far = (far - CLAMP_EPS) / z2
        r_near = (near + CLAMP_EPS) / z2
    far_active = r_far < 1.0
    near_active = r_near > 1.0
    c1 = np.where(far_active, r_far, 1.0)
    c2 = np.where(near_active, r_near, 1.0)
    c = c1 * c2
    dc = np.where(far_active, -r_far / z2, 0.0) * c2 + c1 * np.where(near_active, -r_near / z2, 0.0)
    X3 = X2 * c[:, None]
    bad = ~np.all(np.isfinite(X3), axis=1)
    if np.any(bad):
        raise FloatingPointError(f"non-finite vertex position at vertex {int(np.flatnonzero(bad)[0])}")
    clip = np.column_stack([X3, np.ones(n)]) @ P0.T
    return VertexPositions(
        clip=clip, points=X3, P0=P0, _X=X, _J=J, _zlin=zlin, _k=k, _c=c, _dc=dc, _o=o, _s=s, _fz=fz
    )


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3); 0 where uncovered
    depth: np.ndarray  # (H, W) linear metres; NaN where uncovered
    coverage: np.ndarray  # (H, W) bool
    tri_index: np.ndarray  # (H, W) int, -1 where uncovered
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    saved: dict = field(repr=False, default_factory=dict)


def _screen(clip: np.ndarray, width: int, height: int):
    w = clip[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (clip[:, 0] / w + 1.0) * (width / 2.0)
        sy = (clip[:, 1] / w + 1.0) * (height / 2.0)
        zndc = clip[:, 2] / w
    return sx, sy, zndc, w


def rasterize_clip(clip: np.ndarray, faces: np.ndarray, colors: np.ndarray, width: int, height: int) -> RenderOutput:
    """Rasterise clip-space triangles (no view transform)."""
    clip = np.ascontiguousarray(clip, dtype=float).reshape(-1, 4)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    sx, sy, zndc, w = _screen(clip, width, height)
    tri, b, _ = rasterize(sx, sy, zndc, w, faces, width, height)
    cov = tri >= 0
    color = np.zeros((height, width, 3))
    depth = np.full((height, width), np.nan)
    bary = np.zeros((height, width, 3))
    if np.any(cov):
        f = faces[tri[cov]]
        bs = b[cov]
        q = bs / w[f]
        Q = q.sum(axis=1)
        lam = q / Q[:, None]
        depth[cov] = 1.0 / Q
        color[cov] = np.einsum("pk,pkc->pc", lam, colors[f])
        bary[cov] = lam
    return RenderOutput(
        color=color,
        depth=depth,
        coverage=cov,
        tri_index=tri,
        bary=bary,
        saved={"clip": clip, "faces": faces, "colors": colors, "screen_bary": b, "width": width, "height": height},
    )


def view_matrix(target: View, ref: View, near: float, far: float) -> np.ndarray:
    """4x4 map from reference OpenGL camera coordinates to target clip coordinates."""
    P_i = projection_from_intrinsics(target.intrinsics, near, far)
    return P_i @ gl_relative_transform(target.pose, ref.pose)


def render(positions: VertexPositions, mesh: DepthMesh, target: View, ref: View) -> RenderOutput:
    """Render the depth mesh, posed by ``positions``, into ``target``."""
    near, far = near_far(positions.P0)
    M = view_matrix(target, ref, near, far)
    h = positions.clip @ np.linalg.inv(positions.P0).T
    X = h[:, :3] / h[:, 3:4]
    clip = np.column_stack([X, np.ones(len(X))]) @ M.T
    c = target.intrinsics
    out = rasterize_clip(clip, mesh.faces, mesh.colors, c.width, c.height)
    out.saved.update(positions=positions, M=M, h=h, n_vertices=mesh.n_vertices)
    return out


def render_world(vertices: np.ndarray, faces: np.ndarray, colors: np.ndarray, view: View, near: float, far: float):
    """Render a world-space triangle mesh into ``view`` (no gradients)."""
    P = projection_from_intrinsics(view.intrinsics, near, far)
    T = np.diag([1.0, -1.0, -1.0, 1.0]) @ view.pose.matrix
    hom = np.column_stack([np.asarray(vertices, dtype=float), np.ones(len(vertices))])
    clip = hom @ (P @ T).T
    c = view.intrinsics
    return rasterize_clip(clip, faces, np.asarray(colors, dtype=float), c.width, c.height)


def clip_backward(out: RenderOutput, cot_color, cot_depth) -> np.ndarray:
    """``dL/dclip`` (N, 4) in the target view for ``L = <cot_color, color> + <cot_depth, depth>``."""
    sv = out.saved
    clip, faces, colors = sv["clip"], sv["faces"], sv["colors"]
    W, H = sv["width"], sv["height"]
    n = len(clip)
    cov = out.coverage
    g_clip = np.zeros((n, 4))
    if not np.any(cov):
        return g_clip
    gC = np.zeros((int(cov.sum()), 3)) if cot_color is None else np.asarray(cot_color, dtype=float)[cov]
    gD = np.zeros(int(cov.sum())) if cot_depth is None else np.nan_to_num(np.asarray(cot_depth, dtype=float)[cov])
    if not (np.any(gC) or np.any(gD)):
        return g_clip

    py, px = np.nonzero(cov)
    px = px + 0.5
    py = py + 0.5
    f = faces[out.tri_index[cov]]
    b = sv["screen_bary"][cov]
    sx, sy, _, w = _screen(clip, W, H)
    X, Y, Wv = sx[f], sy[f], w[f]
    q = b / Wv
    Q = q.sum(axis=1)
    lam = q / Q[:, None]

    g_lam = np.einsum("pc,pkc->pk", gC, colors[f])
    g_q = (g_lam - np.sum(lam * g_lam, axis=1, keepdims=True)) / Q[:, None] - (gD / (Q * Q))[:, None]
    g_b = g_q / Wv
    g_w = -g_q * b / (Wv * Wv)
    area = (X[:, 1] - X[:, 0]) * (Y[:, 2] - Y[:, 0]) - (X[:, 2] - X[:, 0]) * (Y[:, 1] - Y[:, 0])
    g_E = (g_b - np.sum(g_b * b, axis=1, keepdims=True)) / area[:, None]

    g_x = np.zeros_like(X)
    g_y = np.zeros_like(Y)
    for k in range(3):
        k1, k2 = (k + 1) % 3, (k + 2) % 3
        # E_k = (x1 - px)(y2 - py) - (x2 - px)(y1 - py)
        g_x[:, k1] += g_E[:, k] * (Y[:, k2] - py)
        g_y[:, k2] += g_E[:, k] * (X[:, k1] - px)
        g_x[:, k2] -= g_E[:, k] * (Y[:, k1] - py)
        g_y[:, k1] -= g_E[:, k] * (X[:, k2] - px)

    cx, cy = clip[f, 0], clip[f, 1]
    g_cx = g_x * (W / 2.0) / Wv
    g_cy = g_y * (H / 2.0) / Wv
    g_cw = g_w - g_x * (W / 2.0) * cx / (Wv * Wv) - g_y * (H / 2.0) * cy / (Wv * Wv)
    idx = f.ravel()
    g_clip[:, 0] = np.bincount(idx, g_cx.ravel(), minlength=n)
    g_clip[:, 1] = np.bincount(idx, g_cy.ravel(), minlength=n)
    g_clip[:, 3] = np.bincount(idx, g_cw.ravel(), minlength=n)
    return g_clip


def render_backward(out: RenderOutput, cot_color=None, cot_depth=None) -> VertexParamGrads:
    """Exact vertex-parameter gradients of ``<cot_color, color> + <cot_depth, depth>``."""
    sv = out.saved
    if "positions" not in sv:
        raise ValueError("render output carries no saved vertex geometry")
    positions: VertexPositions = sv["positions"]
    if sv["n_vertices"] != len(positions.clip) or len(sv["clip"]) != len(positions.clip):
        raise ValueError("render output does not match the saved geometry")
    g_clip_i = clip_backward(out, cot_color, cot_depth)
    g_X = g_clip_i @ sv["M"][:, :3]
    h = sv["h"]
    hw = h[:, 3]
    g_h = np.zeros_like(h)
    g_h[:, :3] = g_X / hw[:, None]
    g_h[:, 3] = -np.einsum("ij,ij->i", g_X, h[:, :3]) / (hw * hw)
    g_clip0 = g_h @ np.linalg.inv(positions.P0)
    return positions.backward(g_clip0)
