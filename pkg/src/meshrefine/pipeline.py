"""Two-stage refinement: global alignment, coarse field, bake + decimate, local refinement."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np
from scipy.ndimage import minimum_filter

from .core import View, near_far, pixel_to_ndc, projection_from_intrinsics, to_reciprocal
from .field import PRESETS, CoarseField, FieldConfig
from .imageops import normalize01, normalize01_vjp, sobel_edge_image, sobel_edge_image_vjp
from .io import parse_manifest, read_pfm, read_ppm, read_points
from .losses import (
    LossBreakdown,
    REDUCTIONS,
    LossWeights,
    ProjectedPoints,
    coarse_point_residual,
    l_geo_map,
    l_photo,
    project_cloud,
    r_edge,
    r_poisson,
    r_smooth,
    total_loss,
)
from .meshing import FZ_BOUNDS, DepthMesh, build_depth_mesh, decimate
from .optim import AdamState, Moments, adam_step
from .rasterizer import apply_vertex_params, render, render_backward

DIVERGENCE_FACTOR = 10.0
DETACH_EXTREMA = True
ERODE = True


def silhouette_weight(E: np.ndarray, d: int) -> np.ndarray:
    """``max(0, E)`` eroded over the footprint of one mesh cell.

    A depth step is rendered as a ramp up to ``d`` pixels wide, so the mask
    around silhouettes must be at least that wide to keep the ramp out.
    """
    size = 2 * math.ceil(d / 2) + 1
    return minimum_filter(np.maximum(E, 0.0), size=size, mode="nearest")


class DivergenceError(RuntimeError):
    """Total loss grew beyond the divergence guard."""


@dataclass(frozen=True)
class PipelineConfig:
    d: int = 4
    r: float = 0.5
    coarse_iters: int = 400
    local_iters: int = 700
    lr_coarse: float = 0.001
    lr_local: float = 0.0005
    batch: int = 22
    field: str = "mlp-s"
    tau_e: float = 0.03
    weights: LossWeights = dc_field(default_factory=LossWeights)
    reduction: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.coarse_iters < 0 or self.local_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if not (self.lr_coarse > 0 and self.lr_local > 0):
            raise ValueError("learning rates must be positive")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")
        if not 0 < self.r <= 1:
            raise ValueError("r must be in (0, 1]")
        if self.field not in PRESETS:
            raise ValueError(f"unknown field preset {self.field!r}")
        if not self.tau_e > 0:
            raise ValueError("tau_e must be positive")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")

    @property
    def field_config(self) -> FieldConfig:
        return PRESETS[self.field]

    def describe(self) -> str:
        items = asdict(self)
        w = items.pop("weights")
        parts = [f"{k}={v}" for k, v in items.items()]
        parts += [f"w_{k}={v}" for k, v in w.items()]
        return " ".join(parts)


# --------------------------------------------------------------------- scene


@dataclass
class Scene:
    """Everything the optimisation reads: reference + auxiliary views, mono depth, sparse cloud."""

    ref: View
    aux: list[View]
    mono: np.ndarray
    points: np.ndarray
    near: float
    far: float
    gt: np.ndarray | None = None

    def __post_init__(self):
        if self.ref.image is None:
            raise ValueError("reference view has no image")
        if any(v.image is None for v in self.aux):
            raise ValueError("auxiliary view without image")
        if self.mono.shape != self.ref.intrinsics.shape:
            raise ValueError("mono depth size does not match the reference view")
        if self.gt is not None and self.gt.shape != self.mono.shape:
            raise ValueError("gt depth size does not match the reference view")


def load_scene(manifest_path) -> Scene:
    m = parse_manifest(manifest_path, check_files=True)
    views = []
    for rec in m.views:
        img = read_ppm(m.resolve(rec.image))
        views.append(View(rec.id, rec.intrinsics, rec.pose, image=img, image_path=str(m.resolve(rec.image))))
    ref = next(v for v in views if v.id == m.ref_view)
    aux = [v for v in views if v.id != m.ref_view]
    mono = read_pfm(m.resolve(m.mono)).astype(float)
    gt = read_pfm(m.resolve(m.gt)).astype(float) if m.gt is not None else None
    pts = read_points(m.resolve(m.points))
    return Scene(ref, aux, mono, pts, m.near, m.far, gt)


# --------------------------------------------------------------------- global alignment


def _mono_valid(mono: np.ndarray) -> np.ndarray:
    return np.isfinite(mono)


def align_statistics(mono_values: np.ndarray, cloud_depths: np.ndarray):
    """Solve ``a m_D + b = m_X`` and ``a q_D + b = q_X`` (median and 0.001-quantile).

    Returns ``(a, b, fallback)``; ``fallback`` is True when the affine solution had
    ``a <= 0`` and median-ratio scaling was used instead.
    """
    mono_values = np.asarray(mono_values, dtype=float)
    cloud_depths = np.asarray(cloud_depths, dtype=float)
    if mono_values.size < 2:
        raise ValueError("degenerate mono statistics")
    if cloud_depths.size < 2:
        raise ValueError("degenerate cloud statistics")
    mD, qD = np.median(mono_values), np.quantile(mono_values, 0.001)
    mX, qX = np.median(cloud_depths), np.quantile(cloud_depths, 0.001)
    if not mD > qD:
        raise ValueError("degenerate mono statistics")
    a = (mX - qX) / (mD - qD)
    b = mX - a * mD
    if a > 0:
        return float(a), float(b), False
    if not mD > 0:
        raise ValueError("degenerate mono statistics")
    return float(mX / mD), 0.0, True


def global_align(mono: np.ndarray, cloud, ref: View):
    """Affine map of the relative mono depth onto the metric cloud; returns ``(a, b, D_g)``."""
    pts = cloud if isinstance(cloud, ProjectedPoints) else project_cloud(cloud, ref)
    valid = _mono_valid(mono)
    a, b, fallback = align_statistics(mono[valid], pts.z)
    if fallback:
        warnings.warn("global alignment produced a non-positive scale; using the median ratio", RuntimeWarning)
    return a, b, np.where(valid, a * mono + b, np.nan)


# --------------------------------------------------------------------- state


@dataclass
class Frame:
    """Fixed per-scene quantities derived from the reference view."""

    scene: Scene
    P0: np.ndarray
    Dg: np.ndarray
    Dr: np.ndarray
    mono_valid: np.ndarray
    Er: np.ndarray
    Ep: np.ndarray
    pts: ProjectedPoints
    z_range: tuple[float, float]
    pts_ndc: np.ndarray
    pts_zg: np.ndarray
    pts_hit: np.ndarray

    def z_in(self, z: np.ndarray) -> np.ndarray:
        lo, hi = self.z_range
        return (z - lo) / (hi - lo) if hi > lo else np.zeros_like(z)


@dataclass
class RefinementState:
    mesh: DepthMesh
    field: CoarseField
    adam: AdamState
    stage: str = "coarse"
    iteration: int = 0
    history: list = dc_field(default_factory=list)
    log: list = dc_field(default_factory=list)


def prepare(scene: Scene, config: PipelineConfig, Dg: np.ndarray | None = None):
    """Build the fixed frame data and the initial state.

    ``Dg`` overrides the global alignment (used to start from a known metric map).
    """
    ref = scene.ref
    c = ref.intrinsics
    P0 = projection_from_intrinsics(c, scene.near, scene.far)
    valid = _mono_valid(scene.mono)
    Dr, _, ok = normalize01(scene.mono, valid)
    Er = sobel_edge_image(np.where(valid, Dr, 0.0), valid, config.tau_e)
    Ep = silhouette_weight(Er, config.d) if ERODE else np.maximum(Er, 0.0)
    pts = project_cloud(scene.points, ref)
    if len(pts) == 0:
        raise ValueError("no sparse point projects into the reference view")
    if Dg is None:
        _, _, Dg = global_align(scene.mono, pts, ref)
    Dg = np.asarray(Dg, dtype=float)
    gvalid = np.isfinite(Dg) & (Dg > 0)
    if not np.any(gvalid):
        raise ValueError("aligned depth has no valid pixel")
    Dg = np.where(gvalid, np.clip(Dg, scene.near, scene.far), np.nan)
    z_range = (float(np.nanmin(Dg)), float(np.nanmax(Dg)))

    smp = pts.sampler
    hit = smp.taps_valid(gvalid)
    zg = smp.sample(np.where(gvalid, Dg, 0.0))
    un, vn = pixel_to_ndc(pts.u, pts.v, c.width, c.height)
    frame = Frame(scene, P0, Dg, Dr, valid, Er, Ep, pts, z_range, np.column_stack([un, vn]), zg, hit)

    mesh = build_depth_mesh(Dg, ref.image, c, config.d, P0)
    if mesh.n_faces == 0:
        raise ValueError("depth mesh has no faces")
    fld = CoarseField.initialise(config.field_config, config.seed)
    return frame, RefinementState(mesh, fld, AdamState())


# --------------------------------------------------------------------- loss evaluation


def _field_inputs(frame: Frame, mesh: DepthMesh):
    return mesh.ndc[:, 0], mesh.ndc[:, 1], frame.z_in(mesh.linear_depth())


def _reference_terms(frame: Frame, mesh, positions, config: PipelineConfig):
    """Reference-view terms; returns ``(terms, cot_depth, g_du_edge, g_dv_edge, out)``."""
    w = config.weights
    ref = frame.scene.ref
    out = render(positions, mesh, ref, ref)
    D, cov = out.depth, out.coverage
    H, W = cov.shape
    terms = {}
    cot = np.zeros((H, W))

    geo, g_geo, _ = l_geo_map(D, frame.pts, cov)
    terms["geo"] = geo
    cot += w.geo * g_geo

    rs, g_rs = r_smooth(D, cov, config.reduction)
    terms["rs"] = rs
    cot += w.rs * g_rs

    Dn, _, _ = normalize01(D, cov)
    Dn0 = np.where(cov, Dn, 0.0)
    rp, g_rp = r_poisson(Dn0, cov, frame.Dr, frame.Ep, config.reduction)
    terms["rp"] = rp
    g_Dn = w.rp * g_rp

    E_star = sobel_edge_image(Dn0, cov, config.tau_e)
    u, v = mesh.pixel_coords()
    re, g_E, gx, gy = r_edge(E_star, frame.Er, u - 0.5, v - 0.5, config.reduction)
    terms["re"] = re
    g_Dn = g_Dn + w.re * sobel_edge_image_vjp(g_E, Dn0, cov, config.tau_e)
    cot += normalize01_vjp(g_Dn, D, cov, detach=DETACH_EXTREMA)
    return terms, np.where(cov, cot, 0.0), w.re * gx * (W / 2.0), w.re * gy * (H / 2.0), out


def coarse_objective(frame: Frame, state: RefinementState, config: PipelineConfig):
    """Coarse-stage loss and gradients w.r.t. the field parameters and ``du``, ``dv``."""
    mesh, fld = state.mesh, state.field
    w = config.weights
    o, s, cache = fld.forward(*_field_inputs(frame, mesh))
    pos = apply_vertex_params(mesh, o, s, frame.P0)
    terms, cot, g_du_e, g_dv_e, out = _reference_terms(frame, mesh, pos, config)
    g = render_backward(out, None, cot)

    # second geometric term: the remapped mono depth evaluated at the points
    hit = frame.pts_hit
    n = len(frame.pts)
    g_psi = fld.backward(cache, g.o, g.s)
    if np.any(hit):
        op, sp_, cache_p = fld.forward(frame.pts_ndc[hit, 0], frame.pts_ndc[hit, 1], frame.z_in(frame.pts_zg[hit]))
        val, g_o, g_s = coarse_point_residual(frame.pts_zg[hit], op, sp_, frame.pts.z[hit])
        frac = hit.sum() / n
        terms["geo"] += val * frac
        gp = fld.backward(cache_p, w.geo * g_o * frac, w.geo * g_s * frac)
        g_psi = [a + b for a, b in zip(g_psi, gp)]
    terms["photo"] = 0.0
    bd = total_loss(terms, w, "coarse")
    grads = {f"psi{i}": gi for i, gi in enumerate(g_psi)}
    grads["du"] = g.du + g_du_e
    grads["dv"] = g.dv + g_dv_e
    return bd, grads


def local_objective(frame: Frame, state: RefinementState, config: PipelineConfig, batch: list[View]):
    """Local-stage loss and gradients w.r.t. ``du``, ``dv``, ``fz``."""
    mesh = state.mesh
    w = config.weights
    pos = apply_vertex_params(mesh, None, None, frame.P0)
    terms, cot, g_du_e, g_dv_e, out = _reference_terms(frame, mesh, pos, config)
    g = render_backward(out, None, cot)
    photo = 0.0
    for view in batch:
        oi = render(pos, mesh, view, frame.scene.ref)
        val, g_I, g_D = l_photo(oi.color, view.image, oi.depth, oi.coverage, config.tau_e, config.reduction)
        photo += val / len(batch)
        if w.photo > 0:
            k = w.photo / len(batch)
            g += render_backward(oi, g_I * k, g_D * k)
    terms["photo"] = photo
    bd = total_loss(terms, w, "local")
    return bd, {"du": g.du + g_du_e, "dv": g.dv + g_dv_e, "fz": g.fz}


# --------------------------------------------------------------------- stages


def format_log(it: int, bd: LossBreakdown) -> str:
    return (
        f"iter={it} stage={bd.stage} total={bd.total:.9g} geo={bd.geo:.9g} photo={bd.photo:.9g} "
        f"rs={bd.rs:.9g} rp={bd.rp:.9g} re={bd.re:.9g}"
    )


def _record(state: RefinementState, bd: LossBreakdown, log_fn):
    state.history.append(bd)
    line = format_log(state.iteration, bd)
    state.log.append(line)
    if log_fn is not None:
        log_fn(line)
    state.iteration += 1


def _guard(bd: LossBreakdown, initial: float, stage: str, it: int):
    # the edge term is signed, so measure growth relative to |initial|
    limit = initial + (DIVERGENCE_FACTOR - 1.0) * max(abs(initial), 1e-12)
    if bd.total > limit:
        raise DivergenceError(
            f"{stage} stage diverged at iteration {it}: total {bd.total:.6g} exceeds the guard {limit:.6g} "
            f"(initial {initial:.6g}; geo={bd.geo:.4g} photo={bd.photo:.4g} rs={bd.rs:.4g} rp={bd.rp:.4g} re={bd.re:.4g})"
        )


def _delta_bounds(mesh: DepthMesh) -> dict:
    bu, bv = mesh.delta_bounds
    return {"du": (-bu, bu), "dv": (-bv, bv), "fz": FZ_BOUNDS}


def coarse_stage(frame: Frame, state: RefinementState, config: PipelineConfig, log_fn=None) -> RefinementState:
    if state.stage != "coarse":
        raise ValueError(f"coarse stage needs a coarse state, got {state.stage!r}")
    mesh = state.mesh
    bounds = _delta_bounds(mesh)
    initial = None
    for _ in range(config.coarse_iters):
        bd, grads = coarse_objective(frame, state, config)
        if initial is None:
            initial = bd.total
        _guard(bd, initial, "coarse", state.iteration)
        _record(state, bd, log_fn)
        params = {f"psi{i}": p for i, p in enumerate(state.field.params)}
        params.update(du=mesh.du, dv=mesh.dv)
        new = adam_step(params, grads, state.adam, config.lr_coarse, bounds)
        state.field.params = [new[f"psi{i}"] for i in range(len(state.field.params))]
        mesh.du, mesh.dv = new["du"], new["dv"]
    state.stage = "coarse-done"
    return state


def bake(frame: Frame, state: RefinementState) -> DepthMesh:
    """Write the field's current remapping (and ``fz``) into the vertex depths."""
    mesh = state.mesh.copy()
    o, s = state.field(*_field_inputs(frame, mesh))
    pos = apply_vertex_params(mesh, o, s, frame.P0)
    changed = (o != 0) | (s != 0) | (mesh.fz != 1.0) | (pos._c != 1.0)
    if np.any(changed):
        near, far = near_far(frame.P0)
        mesh.zr = mesh.zr.copy()
        mesh.zr[changed] = to_reciprocal(pos.depth[changed], near, far)
        mesh.fz = np.ones(mesh.n_vertices)
    return mesh


def bake_and_decimate(frame: Frame, state: RefinementState, config: PipelineConfig) -> RefinementState:
    if state.stage != "coarse-done":
        raise ValueError(f"bake needs a completed coarse stage, got {state.stage!r}")
    mesh = bake(frame, state)
    res = decimate(mesh, config.r, return_info=True)
    state.mesh = res.mesh
    state.field = CoarseField(FieldConfig("none"))
    groups = {}
    for name in ("du", "dv"):
        if name in state.adam.groups:
            groups[name] = state.adam.groups[name].subset(res.kept)
    groups["fz"] = Moments.zeros_like(res.mesh.fz)
    state.adam.groups = groups
    state.stage = "baked"
    return state


class ViewBatcher:
    """Seeded epoch-wise shuffling of auxiliary views, drawn without replacement."""

    def __init__(self, n_views: int, batch: int, seed):
        self.n = n_views
        self.b = min(batch, n_views)
        self.rng = np.random.default_rng(seed)
        self.queue: list[int] = []

    def next(self) -> list[int]:
        out: list[int] = []
        while len(out) < self.b:
            if not self.queue:
                self.queue = [int(i) for i in self.rng.permutation(self.n)]
            # a view left over from the previous epoch may also open the new one;
            # skip it for this batch and keep it at the front of the queue
            j = next(k for k, i in enumerate(self.queue) if i not in out)
            out.append(self.queue.pop(j))
        return out


def local_stage(frame: Frame, state: RefinementState, config: PipelineConfig, log_fn=None) -> RefinementState:
    if state.stage != "baked":
        raise ValueError(f"local stage needs a baked state, got {state.stage!r}")
    mesh = state.mesh
    bounds = _delta_bounds(mesh)
    aux = frame.scene.aux
    batcher = ViewBatcher(len(aux), config.batch, config.seed + 1)
    initial = None
    for _ in range(config.local_iters):
        batch = [aux[i] for i in batcher.next()]
        bd, grads = local_objective(frame, state, config, batch)
        if initial is None:
            initial = bd.total
        _guard(bd, initial, "local", state.iteration)
        _record(state, bd, log_fn)
        new = adam_step({"du": mesh.du, "dv": mesh.dv, "fz": mesh.fz}, grads, state.adam, config.lr_local, bounds)
        mesh.du, mesh.dv, mesh.fz = new["du"], new["dv"], new["fz"]
    state.stage = "local-done"
    return state


def render_reference(frame: Frame, state: RefinementState):
    """Depth map of the reference view for the current state (field applied if any)."""
    mesh = state.mesh
    o, s = state.field(*_field_inputs(frame, mesh))
    pos = apply_vertex_params(mesh, o, s, frame.P0)
    return render(pos, mesh, frame.scene.ref, frame.scene.ref)


@dataclass
class RunResult:
    depth: np.ndarray
    mesh: DepthMesh
    history: list
    metrics: object | None
    initial_depth: np.ndarray
    initial_metrics: object | None
    log: list


def run(scene: Scene | str | Path, config: PipelineConfig | None = None, log_fn=None, Dg=None) -> RunResult:
    """Full method: align, mesh, coarse stage, bake + decimate, local stage, final render."""
    from .metrics import compute_metrics

    config = config or PipelineConfig()
    if not isinstance(scene, Scene):
        scene = load_scene(scene)
    header = f"config {config.describe()}"
    if log_fn is not None:
        log_fn(header)
    frame, state = prepare(scene, config, Dg)
    state.log.append(header)
    coarse_stage(frame, state, config, log_fn)
    bake_and_decimate(frame, state, config)
    local_stage(frame, state, config, log_fn)
    depth = render_reference(frame, state).depth
    metrics = init_metrics = None
    if scene.gt is not None:
        metrics = compute_metrics(depth, scene.gt)
        init_metrics = compute_metrics(frame.Dg, scene.gt)
    return RunResult(depth, state.mesh, state.history, metrics, frame.Dg, init_metrics, state.log)

