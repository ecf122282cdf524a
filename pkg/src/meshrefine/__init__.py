"""Refine monocular depth maps with a meshed depth representation and a differentiable rasterizer."""

from .core import Intrinsics, Pose, View, depth_reciprocal_convert, pixel_ndc_convert, projection_from_intrinsics
from .estimator import DepthRefiner, GlobalDepthAligner
from .io import export_obj, import_colmap_text, parse_manifest, read_pfm, read_ppm, write_pfm, write_ppm
from .losses import LossWeights
from .meshing import DepthMesh, build_depth_mesh, decimate
from .metrics import MetricsReport, compute_metrics
from .pipeline import DivergenceError, PipelineConfig, Scene, global_align, load_scene, run
from .synth import SceneSpec, build_scene, generate_scene

__version__ = "0.1.0"

__all__ = [
    "DepthMesh",
    "DepthRefiner",
    "DivergenceError",
    "GlobalDepthAligner",
    "Intrinsics",
    "LossWeights",
    "MetricsReport",
    "PipelineConfig",
    "Pose",
    "Scene",
    "SceneSpec",
    "View",
    "build_depth_mesh",
    "build_scene",
    "compute_metrics",
    "decimate",
    "depth_reciprocal_convert",
    "export_obj",
    "generate_scene",
    "global_align",
    "import_colmap_text",
    "load_scene",
    "parse_manifest",
    "pixel_ndc_convert",
    "projection_from_intrinsics",
    "read_pfm",
    "read_ppm",
    "run",
    "write_pfm",
    "write_ppm",
]
