"""Deterministic synthetic scenes with exact ground truth.

The world frame is the reference camera's vision frame: x right, y down, z
forward.  Geometry is a set of textured rectangles tessellated at about 3 cm and
rendered with the same rasteriser the optimiser uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Intrinsics, Pose, View, matrix_to_quaternion
from .imageops import normalize01
from .io import SceneManifest, ViewRecord, write_manifest, write_pfm, write_points, write_ppm
from .rasterizer import render_world

PRESETS = ("plane", "box-room")
SPACING = 0.03
MONO_MAX_CYCLES = 1.5  # highest warp frequency, cycles per frame

# sparse cloud quality levels: (points, relative noise, outlier fraction)
CLOUD_GOOD = (5000, 0.02, 0.02)
CLOUD_POOR_MILD = (3500, 0.05, 0.05)
CLOUD_POOR = (1000, 0.10, 0.10)


@dataclass(frozen=True)
class SceneSpec:
    preset: str = "box-room"
    width: int = 160
    height: int = 120
    views: int = 12
    radius: float = 0.3
    jitter: float = 0.05
    texture_seed: int = 0
    mono_amplitude: float = 0.1
    n_points: int = 5000
    noise: float = 0.02
    outliers: float = 0.02
    seed: int = 0
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.views < 2:
            raise ValueError("need at least two views")
        if self.width < 2 or self.height < 2:
            raise ValueError("image too small")
        if self.mono_amplitude < 0 or self.radius < 0 or self.jitter < 0 or self.noise < 0:
            raise ValueError("amplitudes must be non-negative")
        if not 0 <= self.outliers < 1:
            raise ValueError("outlier fraction must be in [0, 1)")
        if self.n_points < 1:
            raise ValueError("need at least one point")


# --------------------------------------------------------------------- geometry


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray


def _value_noise(s, t, rng, cell=0.2, octaves=3):
    """Smooth lattice noise in [0, 1] over plane coordinates (metres)."""
    out = np.zeros_like(s)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        c = cell / 2**o
        lattice = rng.random((64, 64))
        x, y = s / c, t / c
        x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
        fx, fy = x - x0, y - y0
        fx, fy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
        L = lambda i, j: lattice[i % 64, j % 64]  # noqa: E731
        v = (
            L(x0, y0) * (1 - fx) * (1 - fy)
            + L(x0 + 1, y0) * fx * (1 - fy)
            + L(x0, y0 + 1) * (1 - fx) * fy
            + L(x0 + 1, y0 + 1) * fx * fy
        )
        out += amp * v
        total += amp
        amp *= 0.5
    return out / total


def _rect(origin, e1, e2, rng, tint):
    """Tessellated, textured rectangle ``origin + a e1 + b e2`` with ``a, b`` in [0, 1]."""
    origin, e1, e2 = (np.asarray(x, dtype=float) for x in (origin, e1, e2))
    l1, l2 = np.linalg.norm(e1), np.linalg.norm(e2)
    n1, n2 = max(2, math.ceil(l1 / SPACING) + 1), max(2, math.ceil(l2 / SPACING) + 1)
    a, b = np.meshgrid(np.linspace(0, 1, n1), np.linspace(0, 1, n2))
    verts = origin + a.ravel()[:, None] * e1 + b.ravel()[:, None] * e2
    s, t = a.ravel() * l1, b.ravel() * l2
    noise = _value_noise(s, t, rng)
    checker = ((np.floor(s / 0.25) + np.floor(t / 0.25)) % 2).astype(float)
    lum = 0.25 + 0.5 * noise + 0.2 * checker
    colors = np.clip(lum[:, None] * np.asarray(tint, dtype=float), 0.0, 1.0)
    idx = np.arange(n1 * n2).reshape(n2, n1)
    p, q = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    r, w = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([p, q, w]), np.column_stack([p, w, r])])
    return TriMesh(verts, faces, colors)


def _box(lo, hi, rng, tint):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    ex, ey, ez = np.diag(hi - lo)
    return [
        _rect(lo, ex, ey, rng, tint),
        _rect(lo + ez, ex, ey, rng, tint),
        _rect(lo, ey, ez, rng, tint),
        _rect(lo + ex, ey, ez, rng, tint),
        _rect(lo, ex, ez, rng, tint),
        _rect(lo + ey, ex, ez, rng, tint),
    ]


def _merge(parts: list[TriMesh]) -> TriMesh:
    verts, faces, cols, off = [], [], [], 0
    for p in parts:
        verts.append(p.vertices)
        faces.append(p.faces + off)
        cols.append(p.colors)
        off += len(p.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces).astype(np.int64), np.concatenate(cols))


def scene_geometry(preset: str, texture_seed: int = 0) -> TriMesh:
    rng = np.random.default_rng(texture_seed)
    if preset == "plane":
        return _merge([_rect((-4.0, -3.0, 3.0), (8.0, 0, 0), (0, 6.0, 0), rng, (0.9, 0.8, 0.7))])
    if preset == "box-room":
        parts = [
            _rect((-4.5, -3.5, 6.0), (9.0, 0, 0), (0, 4.7, 0), rng, (0.85, 0.85, 0.95)),  # back wall
            _rect((-4.5, 1.2, 0.5), (9.0, 0, 0), (0, 0, 5.5), rng, (0.8, 0.7, 0.55)),  # floor
            _rect((-2.5, -3.5, 0.5), (0, 4.7, 0), (0, 0, 5.5), rng, (0.6, 0.85, 0.7)),  # left wall
        ]
        parts += _box((-1.4, 0.2, 1.6), (-0.3, 1.2, 2.4), rng, (0.95, 0.6, 0.5))
        parts += _box((0.5, -0.4, 3.2), (1.6, 1.2, 4.0), rng, (0.5, 0.6, 0.95))
        return _merge(parts)
    raise ValueError(f"unknown preset {preset!r}")


# --------------------------------------------------------------------- cameras


def look_at(center, target) -> Pose:
    """World-to-camera pose of a camera at ``center`` looking at ``target`` (y down)."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center)


def make_views(spec: SceneSpec, rng) -> list[View]:
    w, h = spec.width, spec.height
    f = 0.8 * w
    intr = Intrinsics(f, f, w / 2.0, h / 2.0, w, h)
    target = np.array([0.0, 0.0, 4.0])
    views = [View(0, intr, Pose.identity())]
    n_aux = spec.views - 1
    for k in range(n_aux):
        theta = 2 * math.pi * k / n_aux
        c = np.array([spec.radius * math.cos(theta), 0.6 * spec.radius * math.sin(theta), 0.0])
        c = c + rng.normal(0.0, spec.jitter, 3) * np.array([1.0, 1.0, 0.5])
        tgt = target + rng.normal(0.0, spec.jitter, 3)
        views.append(View(k + 1, intr, look_at(c, tgt)))
    return views


# --------------------------------------------------------------------- mono + points


def smooth_field(shape, seed, n_terms: int = 3) -> np.ndarray:
    """Sum of at most three low-frequency sinusoids, scaled so that ``|S| <= 1``."""
    rng = np.random.default_rng(seed)
    h, w = shape
    y, x = np.mgrid[0:h, 0:w]
    u, v = (x + 0.5) / w, (y + 0.5) / h
    S = np.zeros(shape)
    amps = rng.uniform(0.3, 1.0, n_terms)
    amps /= amps.sum()
    for a in amps:
        fu, fv = rng.uniform(-MONO_MAX_CYCLES, MONO_MAX_CYCLES, 2)
        S += a * np.sin(2 * math.pi * (fu * u + fv * v) + rng.uniform(0, 2 * math.pi))
    return S


def corrupt_to_mono(gt: np.ndarray, amplitude: float, seed) -> np.ndarray:
    """Relative pseudo-mono depth: ``normalize01(gt (1 + amplitude S))``."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    gt = np.asarray(gt, dtype=float)
    valid = np.isfinite(gt)
    warped = gt if amplitude == 0 else gt * (1.0 + amplitude * smooth_field(gt.shape, seed))
    return normalize01(warped, valid)[0]


def sample_sparse_points(gt: np.ndarray, ref: View, n: int, noise_rel: float, outlier_frac: float, seed):
    """World-space points on the rays of uniformly drawn valid pixels.

    Depths are ``gt (1 + N(0, noise_rel))``; a subset of ``floor(outlier_frac n)``
    points is moved to uniform depths within the gt range.
    """
    if n < 1:
        raise ValueError("need at least one point")
    rng = np.random.default_rng(seed)
    valid = np.flatnonzero(np.isfinite(gt).ravel())
    if len(valid) == 0:
        raise ValueError("gt has no valid pixel")
    pix = rng.choice(valid, size=n, replace=n > len(valid))
    h, w = gt.shape
    py, px = np.divmod(pix, w)
    z_gt = gt.ravel()[pix]
    z = z_gt * (1.0 + rng.normal(0.0, noise_rel, n)) if noise_rel > 0 else z_gt.copy()
    n_out = int(math.floor(outlier_frac * n))
    if n_out:
        sel = rng.choice(n, size=n_out, replace=False)
        z[sel] = rng.uniform(np.nanmin(gt), np.nanmax(gt), n_out)
    c = ref.intrinsics
    X = np.column_stack([(px + 0.5 - c.cx) * z / c.fx, (py + 0.5 - c.cy) * z / c.fy, z])
    return (X - ref.pose.t) @ ref.pose.R


# --------------------------------------------------------------------- scene


@dataclass
class SyntheticScene:
    views: list[View]
    gt: np.ndarray
    mono: np.ndarray
    points: np.ndarray
    geometry: TriMesh


def build_scene(spec: SceneSpec) -> SyntheticScene:
    """Render every view of ``spec`` and derive mono depth and the sparse cloud in memory."""
    ss = np.random.SeedSequence(spec.seed)
    s_views, s_mono, s_pts = ss.spawn(3)
    geo = scene_geometry(spec.preset, spec.texture_seed)
    views = make_views(spec, np.random.default_rng(s_views))
    rendered = []
    gt = None
    for v in views:
        out = render_world(geo.vertices, geo.faces, geo.colors, v, spec.near, spec.far)
        rendered.append(View(v.id, v.intrinsics, v.pose, image=out.color))
        if v.id == 0:
            gt = out.depth
    mono = corrupt_to_mono(gt, spec.mono_amplitude, s_mono)
    pts = sample_sparse_points(gt, rendered[0], spec.n_points, spec.noise, spec.outliers, s_pts)
    return SyntheticScene(rendered, gt, mono, pts, geo)


def generate_scene(spec: SceneSpec, out_dir) -> Path:
    """Write a complete scene directory and return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scene(spec)
    records = []
    for v in sc.views:
        name = f"view_{v.id:03d}.ppm"
        write_ppm(out / name, v.image)
        c = v.intrinsics
        q = matrix_to_quaternion(v.pose.R)
        records.append(
            ViewRecord(
                v.id, name, c.width, c.height, float(c.fx), float(c.fy), float(c.cx), float(c.cy),
                tuple(float(x) for x in q), tuple(float(x) for x in v.pose.t),
            )
        )
    write_pfm(out / "mono.pfm", sc.mono)
    write_pfm(out / "gt.pfm", sc.gt)
    write_points(out / "points.txt", sc.points)
    manifest = SceneManifest(
        near=float(spec.near), far=float(spec.far), ref_view=0, views=records,
        points="points.txt", mono="mono.pfm", gt="gt.pfm", root=out,
    )
    path = out / "scene.txt"
    write_manifest(path, manifest)
    return path
