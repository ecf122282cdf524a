"""Random small scenes and finite-difference checks shared by unit and acceptance tests."""

import numpy as np

from meshrefine.core import Intrinsics, Pose, View, projection_from_intrinsics, quaternion_to_matrix
from meshrefine.meshing import build_depth_mesh
from meshrefine.rasterizer import apply_vertex_params, render, render_backward

H_FD = 1e-6


def small_pose(rng, rot=0.05, trans=0.1):
    q = np.array([1.0, *rng.normal(0, rot, 3)])
    return Pose(quaternion_to_matrix(*q), rng.normal(0, trans, 3))


def random_render_scene(seed):
    """3x3-vertex (8 triangle) mesh on an image of at most 16x16 pixels, randomly posed."""
    rng = np.random.default_rng(seed)
    W, H = int(rng.integers(8, 17)), int(rng.integers(8, 17))
    d = int(np.ceil(max(W, H) / 2.5))
    c = Intrinsics(W * rng.uniform(0.8, 1.2), W * rng.uniform(0.8, 1.2), W / 2, H / 2, W, H)
    P = projection_from_intrinsics(c, 0.1, 100.0)
    depth = rng.uniform(1.5, 4.0, (H, W))
    mesh = build_depth_mesh(depth, rng.random((H, W, 3)), c, d, P)
    bu, bv = mesh.delta_bounds
    mesh.du = rng.uniform(-0.8, 0.8, mesh.n_vertices) * bu
    mesh.dv = rng.uniform(-0.8, 0.8, mesh.n_vertices) * bv
    mesh.fz = rng.uniform(0.7, 1.4, mesh.n_vertices)
    ref = View(0, c, Pose.identity())
    target = View(1, c, small_pose(rng)) if rng.random() < 0.7 else ref
    return mesh, ref, target, rng


def render_gradient_error(seed):
    """Max relative error of render_backward against central differences for one random scene."""
    mesh, ref, target, rng = random_render_scene(seed)
    H, W = target.intrinsics.shape

    def run(m):
        pos = apply_vertex_params(m, None, None, m.P)
        return render(pos, m, target, ref)

    base = run(mesh)
    cot_c = rng.normal(size=(H, W, 3))
    cot_d = rng.normal(size=(H, W))
    # pixels whose owning triangle changes under any perturbation are excluded
    stable = base.coverage.copy()
    outs = {}
    for name in ("du", "dv", "fz"):
        arr = getattr(mesh, name)
        for i in range(mesh.n_vertices):
            for sgn in (1, -1):
                m = mesh.copy()
                getattr(m, name)[i] = arr[i] + sgn * H_FD
                o = run(m)
                stable &= o.tri_index == base.tri_index
                outs[(name, i, sgn)] = o
    cot_c = cot_c * stable[..., None]
    cot_d = np.where(stable, cot_d, 0.0)

    def functional(o):
        return float(np.sum(cot_c * o.color) + np.sum(cot_d * np.nan_to_num(o.depth)))

    g = render_backward(base, cot_c, cot_d)
    worst = 0.0
    for name in ("du", "dv", "fz"):
        ana = getattr(g, name)
        fd = np.array(
            [(functional(outs[(name, i, 1)]) - functional(outs[(name, i, -1)])) / (2 * H_FD) for i in range(mesh.n_vertices)]
        )
        scale = max(np.max(np.abs(fd)), np.max(np.abs(ana)), 1e-8)
        worst = max(worst, float(np.max(np.abs(ana - fd)) / scale))
    return worst, int(stable.sum())


def synthetic_scene(**kw):
    """In-memory pipeline Scene built from a synthetic spec."""
    from meshrefine.pipeline import Scene
    from meshrefine.synth import SceneSpec, build_scene

    spec = SceneSpec(**kw)
    sc = build_scene(spec)
    return Scene(sc.views[0], sc.views[1:], sc.mono, sc.points, spec.near, spec.far, sc.gt)
