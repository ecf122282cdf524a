"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria share one synthetic box-room scene and its default
refinement, computed once per module.
"""

import math
import time

import numpy as np
import pytest

import gradcheck
from helpers import render_gradient_error
from meshrefine.cli import main as cli_main
from meshrefine.core import Intrinsics, Pose, View, projection_from_intrinsics, to_linear, to_reciprocal
from meshrefine.io import read_pfm
from meshrefine.losses import LossWeights
from meshrefine.meshing import build_depth_mesh, decimate
from meshrefine.metrics import compute_metrics
from meshrefine.pipeline import (
    PipelineConfig,
    bake_and_decimate,
    coarse_stage,
    load_scene,
    prepare,
    render_reference,
    run,
)
from meshrefine.rasterizer import apply_vertex_params, render
from meshrefine.synth import CLOUD_POOR, SceneSpec, generate_scene
from test_metrics import brute_force, random_pair


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# --------------------------------------------------------------------- shared runs


@pytest.fixture(scope="module")
def box_room(tmp_path_factory):
    root = tmp_path_factory.mktemp("box_room")
    return generate_scene(SceneSpec(), root / "good")


@pytest.fixture(scope="module")
def default_refine(box_room, tmp_path_factory):
    """Two CLI refinements of the good-cloud scene with the default configuration."""
    out = tmp_path_factory.mktemp("refine")
    paths = []
    t0 = time.perf_counter()
    for k in range(2):
        p = out / f"depth_{k}.pfm"
        assert cli_main(["refine", "--scene", str(box_room), "--out-depth", str(p), "--seed", "0"]) == 0
        paths.append(p)
    return paths, (time.perf_counter() - t0) / 2


@pytest.fixture(scope="module")
def initial_metrics(box_room):
    scene = load_scene(box_room)
    frame, _ = prepare(scene, PipelineConfig())
    return scene, compute_metrics(frame.Dg, scene.gt)


def _ablation(scene, weights):
    return run(scene, PipelineConfig(weights=weights)).metrics


# --------------------------------------------------------------------- criteria


def test_criterion_01_rasterizer_gradients(capsys):
    t0 = time.perf_counter()
    errs, stable = zip(*(render_gradient_error(s) for s in range(60)))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 1e-4 and min(stable) > 0 and dt < 30
    verdict(capsys, 1, ok, f"60 scenes, max rel err {max(errs):.2e} (<= 1e-4), {dt:.1f} s (< 30 s)")


def test_criterion_02_field_imageops_loss_gradients(capsys):
    t0 = time.perf_counter()
    errs = [f(s) for f in (gradcheck.field_error, gradcheck.imageops_error, gradcheck.loss_error) for s in range(40)]
    dt = time.perf_counter() - t0
    ok = len(errs) >= 100 and max(errs) <= 1e-5 and dt < 30
    verdict(capsys, 2, ok, f"{len(errs)} configurations, max rel err {max(errs):.2e} (<= 1e-5), {dt:.1f} s (< 30 s)")


def test_criterion_03_reciprocal_depth(capsys):
    worst_ulp = 0.0
    worst_rt = 0.0
    for near, far in ((0.1, 100.0), (0.01, 10.0), (0.5, 7.0), (1e-3, 1e4)):
        lo, hi = to_reciprocal(np.array([near, far]), near, far)
        worst_ulp = max(worst_ulp, abs(lo + 1.0) / np.spacing(1.0), abs(hi - 1.0) / np.spacing(1.0))
        z = np.logspace(math.log10(near), math.log10(far), 1_000_000)
        back = to_linear(to_reciprocal(z, near, far), near, far)
        worst_rt = max(worst_rt, float(np.max(np.abs(back - z) / z)))
    ok = worst_ulp <= 4 and worst_rt <= 1e-9
    verdict(capsys, 3, ok, f"boundaries within {worst_ulp:.0f} ulp (<= 4), round trip {worst_rt:.2e} (<= 1e-9)")


def test_criterion_04_coarse_affine_oracle(capsys, tmp_path):
    t0 = time.perf_counter()
    scene = load_scene(generate_scene(SceneSpec(preset="plane"), tmp_path))
    cfg = PipelineConfig(field="affine")
    frame, state = prepare(scene, cfg, Dg=scene.gt * 1.3 + 0.2)
    coarse_stage(frame, state, cfg)
    o, s = state.field.params[0]
    zc = frame.Dg * (1.0 + s) + o
    err = float(np.nanmax(np.abs(zc - scene.gt)))
    dt = time.perf_counter() - t0
    ok = err <= 0.03 and dt < 120
    verdict(capsys, 4, ok, f"max |z^c - gt| = {err:.4f} m (<= 0.03), o={o:.4f} s={s:.4f}, {dt:.0f} s (< 120 s)")


@pytest.mark.slow
def test_criterion_05_end_to_end(capsys, default_refine, initial_metrics):
    (path, _), per_run = default_refine
    scene, m0 = initial_metrics
    m1 = compute_metrics(read_pfm(path), scene.gt)
    ok = m1.mae <= 0.5 * m0.mae and m1.acc_005 >= 1.5 * m0.acc_005 and per_run < 900
    verdict(capsys, 5, ok, f"MAE {m0.mae:.4f} -> {m1.mae:.4f} (ratio {m1.mae / m0.mae:.2f} <= 0.5), "
            f"acc@0.05 {m0.acc_005:.3f} -> {m1.acc_005:.3f} (x{m1.acc_005 / m0.acc_005:.2f} >= 1.5), {per_run:.0f} s/run")


@pytest.mark.slow
def test_criterion_06_poor_cloud(capsys, tmp_path):
    n, noise, outliers = CLOUD_POOR
    scene = load_scene(generate_scene(SceneSpec(n_points=n, noise=noise, outliers=outliers), tmp_path))
    res = run(scene, PipelineConfig())
    m0, m1 = res.initial_metrics, res.metrics
    ok = m1.mae <= 1.0 * m0.mae
    verdict(capsys, 6, ok, f"poor cloud MAE {m0.mae:.4f} -> {m1.mae:.4f} (<= 1.0 x initial)")


def test_criterion_07_decimation_plane(capsys):
    W, H = 64, 48
    c = Intrinsics(W, W, W / 2, H / 2, W, H)
    P = projection_from_intrinsics(c, 0.1, 100.0)
    m = build_depth_mesh(np.full((H, W), 3.0), np.zeros((H, W, 3)), c, 2, P)
    m.zr = 0.8 + 0.05 * m.ndc[:, 0] - 0.03 * m.ndc[:, 1]
    res = decimate(m, 0.25, return_info=True)
    out = res.mesh
    plane = 0.8 + 0.05 * out.ndc[:, 0] - 0.03 * out.ndc[:, 1]
    v = View(0, c, Pose.identity())
    d0 = render(apply_vertex_params(m, None, None, P), m, v, v).depth
    d1 = render(apply_vertex_params(out, None, None, P), out, v, v).depth
    both = np.isfinite(d0) & np.isfinite(d1)
    dev = max(float(np.max(np.abs(out.zr - plane))), float(np.max(np.abs(d0[both] - d1[both]) / d0[both])))
    subset = out.ndc.tobytes() == m.ndc[res.kept].tobytes() and out.zr.tobytes() == m.zr[res.kept].tobytes()
    ok = dev <= 1e-6 and subset and out.n_vertices <= math.ceil(0.25 * m.n_vertices)
    verdict(capsys, 7, ok, f"{m.n_vertices} -> {out.n_vertices} vertices, deviation {dev:.1e} (<= 1e-6), "
            f"bitwise subset {subset}")


def test_criterion_08_baking_invariance(capsys, box_room):
    scene = load_scene(box_room)
    cfg = PipelineConfig(coarse_iters=25, r=1.0)
    frame, state = prepare(scene, cfg)
    coarse_stage(frame, state, cfg)
    before = render_reference(frame, state).depth
    bake_and_decimate(frame, state, cfg)
    after = render_reference(frame, state).depth
    both = np.isfinite(before) & np.isfinite(after)
    rel = float(np.max(np.abs(after[both] - before[both]) / before[both]))
    same_cover = np.array_equal(np.isfinite(before), np.isfinite(after))
    ok = rel <= 1e-6 and same_cover
    verdict(capsys, 8, ok, f"max rel depth change {rel:.1e} (<= 1e-6), identical coverage {same_cover}")


def test_criterion_09_metrics_oracle(capsys):
    mismatches = 0
    for seed in range(100):
        pred, gt = random_pair(seed)
        got = compute_metrics(pred, gt)
        mismatches += sum(getattr(got, k) != v for k, v in brute_force(pred, gt).items())
    rng = np.random.default_rng(0)
    invariants = True
    for seed in range(100):
        pred, gt = random_pair(1000 + seed, 8)
        c = rng.uniform(0.1, 10)
        a = compute_metrics(pred, gt, np.inf)
        b = compute_metrics(pred * c, gt * c, np.inf)
        invariants &= math.isclose(b.rmse, c * a.rmse, rel_tol=1e-9) and math.isclose(b.mae, c * a.mae, rel_tol=1e-9)
        invariants &= math.isclose(b.l1_inv, a.l1_inv / c, rel_tol=1e-9) and math.isclose(b.l1_rel, a.l1_rel, rel_tol=1e-9)
        invariants &= abs(b.delta1 - a.delta1) <= 1 / 64 and a.acc_001 <= a.acc_005 <= a.acc_010
    ok = mismatches == 0 and invariants
    verdict(capsys, 9, ok, f"100 map pairs, {mismatches} field mismatches against the brute-force oracle, "
            f"invariants hold {invariants}")


@pytest.mark.slow
def test_criterion_10_determinism(capsys, default_refine):
    (a, b), _ = default_refine
    same = a.read_bytes() == b.read_bytes()
    verdict(capsys, 10, same, f"two default refine runs, bitwise-identical PFM {same}")


@pytest.mark.slow
def test_criterion_11_ablation_order(capsys, default_refine, initial_metrics):
    (path, _), _ = default_refine
    scene, _ = initial_metrics
    geo = _ablation(scene, LossWeights(photo=0.0, geo=0.1, rp=0.0, re=0.0, rs=0.0))
    geo_rp_re = _ablation(scene, LossWeights(photo=0.0, geo=0.1, rp=400.0, re=0.1, rs=0.0))
    full = compute_metrics(read_pfm(path), scene.gt)
    first = geo.acc_005 < geo_rp_re.acc_005
    second = geo_rp_re.acc_005 <= full.acc_005
    verdict(capsys, 11, first and second,
            f"acc@0.05 geo {geo.acc_005:.3f} < geo+Rp+Re {geo_rp_re.acc_005:.3f}: {first}; "
            f"geo+Rp+Re <= default {full.acc_005:.3f}: {second}")
