"""scikit-learn style wrappers around the refinement pipeline."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .core import View
from .losses import LossWeights, project_cloud
from .pipeline import PipelineConfig, Scene, align_statistics, load_scene, run


def _as_scene(X) -> Scene:
    if isinstance(X, Scene):
        return X
    if isinstance(X, (str, Path)):
        return load_scene(X)
    raise TypeError(f"expected a Scene or a manifest path, got {type(X).__name__}")


def _depth_map(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 2D array, got shape {a.shape}")
    if np.any(np.isinf(a)):
        raise ValueError(f"{name} contains infinite values")
    return a


class GlobalDepthAligner(BaseEstimator):
    """Affine map of a relative depth map onto metric sparse depths.

    ``fit`` matches the median and the 0.001-quantile of the mono values to
    those of the cloud depths.  Invalid mono pixels are NaN and stay NaN.
    """

    def fit(self, X, y, view: View | None = None):
        """``X``: relative depth map.  ``y``: cloud depths, or world points when ``view`` is given."""
        mono = _depth_map(X, "mono depth")
        if view is not None:
            y = project_cloud(np.asarray(y, dtype=float), view).z
        z = np.asarray(y, dtype=float).ravel()
        z = z[np.isfinite(z)]
        vals = mono[np.isfinite(mono)]
        self.scale_, self.offset_, self.fallback_ = align_statistics(vals, z)
        self.n_points_ = int(z.size)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "scale_")
        mono = _depth_map(X, "mono depth")
        return self.scale_ * mono + self.offset_

    def fit_transform(self, X, y, view: View | None = None) -> np.ndarray:
        return self.fit(X, y, view=view).transform(X)


class DepthRefiner(BaseEstimator):
    """Refine a scene's mono depth into a metric depth map.

    ``fit`` takes a :class:`Scene` or a manifest path and runs both optimisation
    stages.  Fitted attributes: ``depth_`` (reference-view depth, NaN where
    uncovered), ``mesh_``, ``history_`` (one loss breakdown per iteration),
    ``initial_depth_`` and, when the scene has ground truth, ``metrics_`` and
    ``initial_metrics_``.
    """

    def __init__(
        self,
        d: int = 4,
        r: float = 0.5,
        coarse_iters: int = 400,
        local_iters: int = 700,
        lr_coarse: float = 0.001,
        lr_local: float = 0.0005,
        batch: int = 22,
        field: str = "mlp-s",
        tau_e: float = 0.03,
        weights: LossWeights | None = None,
        reduction: str = "mse",
        seed: int = 0,
        verbose: bool = False,
    ):
        self.d = d
        self.r = r
        self.coarse_iters = coarse_iters
        self.local_iters = local_iters
        self.lr_coarse = lr_coarse
        self.lr_local = lr_local
        self.batch = batch
        self.field = field
        self.tau_e = tau_e
        self.weights = weights
        self.reduction = reduction
        self.seed = seed
        self.verbose = verbose

    def config(self) -> PipelineConfig:
        return PipelineConfig(
            d=int(self.d),
            r=float(self.r),
            coarse_iters=int(self.coarse_iters),
            local_iters=int(self.local_iters),
            lr_coarse=float(self.lr_coarse),
            lr_local=float(self.lr_local),
            batch=int(self.batch),
            field=self.field,
            tau_e=float(self.tau_e),
            weights=self.weights if self.weights is not None else LossWeights(),
            reduction=self.reduction,
            seed=int(self.seed),
        )

    def fit(self, X, y=None, initial_depth=None):
        """Run the refinement on scene ``X``.

        ``y`` is ignored.  ``initial_depth`` replaces the global alignment.
        """
        config = self.config()
        scene = _as_scene(X)
        if initial_depth is not None:
            initial_depth = _depth_map(initial_depth, "initial depth")
            if initial_depth.shape != scene.mono.shape:
                raise ValueError("initial depth size does not match the reference view")
        res = run(scene, config, log_fn=print if self.verbose else None, Dg=initial_depth)
        self.depth_ = res.depth
        self.mesh_ = res.mesh
        self.history_ = res.history
        self.log_ = res.log
        self.initial_depth_ = res.initial_depth
        self.metrics_ = res.metrics
        self.initial_metrics_ = res.initial_metrics
        self.config_ = config
        return self

    def predict(self, X=None) -> np.ndarray:
        """Refined depth of the fitted scene, or of a new scene ``X`` (fitted on a clone)."""
        if X is None:
            check_is_fitted(self, "depth_")
            return self.depth_
        return clone(self).fit(X).depth_

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).depth_
