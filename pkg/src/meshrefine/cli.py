"""Command-line entry point: ``refine``, ``eval``, ``synth`` and ``render``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical
divergence.  Errors go to standard error prefixed with ``error:``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .field import PRESETS as FIELD_PRESETS
from .io import export_obj, read_pfm, write_pfm, write_ppm
from .metrics import compute_metrics
from .pipeline import DivergenceError, PipelineConfig, load_scene, prepare, run
from .rasterizer import apply_vertex_params, render
from .synth import PRESETS as SCENE_PRESETS
from .synth import SceneSpec, generate_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshrefine", description="Mono depth refinement with a differentiable depth mesh.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("refine", help="refine a scene's mono depth")
    r.add_argument("--scene", required=True, help="scene manifest")
    r.add_argument("--out-depth", required=True, help="output PFM depth map")
    r.add_argument("--out-mesh", help="optional OBJ export of the refined mesh")
    r.add_argument("--d", type=int, default=4, help="mesh grid spacing in pixels")
    r.add_argument("--r", type=float, default=0.5, help="decimation keep ratio")
    r.add_argument("--coarse-iters", type=int, default=400)
    r.add_argument("--local-iters", type=int, default=700)
    r.add_argument("--lr-coarse", type=float, default=0.001)
    r.add_argument("--lr-local", type=float, default=0.0005)
    r.add_argument("--batch", type=int, default=22)
    r.add_argument("--field", choices=sorted(FIELD_PRESETS), default="mlp-s")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--log", help="write per-iteration loss lines to this file")

    e = sub.add_parser("eval", help="compare a depth map against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--max-depth", type=float, default=7.0)
    e.add_argument("--out", help="also write the report to this file")
    e.add_argument("--json", action="store_true", help="print the report as JSON")

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--preset", required=True, choices=SCENE_PRESETS)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--points", type=int, default=5000)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--outliers", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)

    v = sub.add_parser("render", help="render the aligned depth mesh into one view")
    v.add_argument("--scene", required=True)
    v.add_argument("--view", type=int, required=True, help="view id")
    v.add_argument("--out-image", required=True, help="output PPM colour image")
    v.add_argument("--out-depth", help="optional output PFM depth")
    return p


def _cmd_refine(a) -> int:
    config = PipelineConfig(
        d=a.d, r=a.r, coarse_iters=a.coarse_iters, local_iters=a.local_iters, lr_coarse=a.lr_coarse,
        lr_local=a.lr_local, batch=a.batch, field=a.field, seed=a.seed,
    )
    print(f"config {config.describe()}", flush=True)
    scene = load_scene(a.scene)
    log = open(a.log, "w", encoding="utf-8") if a.log else None
    try:
        res = run(scene, config, log_fn=(lambda line: log.write(line + "\n")) if log else None)
    finally:
        if log:
            log.close()
    write_pfm(a.out_depth, res.depth)
    if a.out_mesh:
        export_obj(res.mesh, scene.ref, a.out_mesh)
    if res.history:
        print(f"final {res.log[-1]}")
    if res.metrics is not None:
        print(f"initial mae={res.initial_metrics.mae:.6g} acc_005={res.initial_metrics.acc_005:.6g}")
        print(f"refined mae={res.metrics.mae:.6g} acc_005={res.metrics.acc_005:.6g}")
    print(f"wrote {a.out_depth}")
    return EXIT_OK


def _cmd_eval(a) -> int:
    print(f"config pred={a.pred} gt={a.gt} max_depth={a.max_depth}")
    report = compute_metrics(read_pfm(a.pred), read_pfm(a.gt), a.max_depth)
    text = report.to_json() + "\n" if a.json else report.to_lines()
    sys.stdout.write(text)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def _cmd_synth(a) -> int:
    spec = SceneSpec(
        preset=a.preset, width=a.width, height=a.height, views=a.views, n_points=a.points,
        noise=a.noise, outliers=a.outliers, seed=a.seed,
    )
    print("config " + " ".join(f"{k}={v}" for k, v in vars(spec).items()), flush=True)
    path = generate_scene(spec, a.out)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_render(a) -> int:
    config = PipelineConfig()
    print(f"config scene={a.scene} view={a.view} d={config.d}", flush=True)
    scene = load_scene(a.scene)
    views = {scene.ref.id: scene.ref, **{v.id: v for v in scene.aux}}
    if a.view not in views:
        raise ValueError(f"no view with id {a.view}")
    frame, state = prepare(scene, config)
    pos = apply_vertex_params(state.mesh, None, None, frame.P0)
    out = render(pos, state.mesh, views[a.view], scene.ref)
    write_ppm(a.out_image, np.clip(out.color, 0.0, 1.0))
    if a.out_depth:
        write_pfm(a.out_depth, out.depth)
    print(f"wrote {a.out_image} coverage={out.coverage.mean():.4f}")
    return EXIT_OK


COMMANDS = {"refine": _cmd_refine, "eval": _cmd_eval, "synth": _cmd_synth, "render": _cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
