"""Depth-map error statistics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

DELTA1_THRESHOLD = 1.25
ACC_THRESHOLDS = (0.01, 0.05, 0.10)


@dataclass(frozen=True)
class MetricsReport:
    valid_fraction: float
    rmse: float
    mae: float
    l1_rel: float
    l1_inv: float
    delta1: float
    acc_001: float
    acc_005: float
    acc_010: float

    def to_lines(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name):.9g}\n" for f in fields(self))

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_lines(cls, text: str) -> "MetricsReport":
        vals = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split("=", 1)
                vals[k.strip()] = float(v)
        return cls(**vals)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, max_depth: float = 7.0) -> MetricsReport:
    """Errors of ``pred`` against ``gt`` over pixels with valid ``gt <= max_depth``.

    A depth is valid when finite and positive.  Error statistics use the
    prediction-valid part of that set; ``valid_fraction`` reports its size.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    with np.errstate(invalid="ignore"):
        gt_ok = np.isfinite(gt) & (gt > 0) & (gt <= max_depth)
        pred_ok = np.isfinite(pred) & (pred > 0)
    n_set = int(gt_ok.sum())
    if n_set == 0:
        raise ValueError("empty evaluation set")
    sel = gt_ok & pred_ok
    n = int(sel.sum())
    if n == 0:
        nan = float("nan")
        return MetricsReport(0.0, nan, nan, nan, nan, 0.0, 0.0, 0.0, 0.0)
    p, g = pred[sel], gt[sel]
    err = np.abs(p - g)
    ratio = np.maximum(p / g, g / p)

    # correctly rounded sums make the statistics independent of pixel order
    def mean(x):
        return math.fsum(x.tolist()) / n

    def frac(flags):
        return int(np.count_nonzero(flags)) / n

    return MetricsReport(
        valid_fraction=n / n_set,
        rmse=math.sqrt(mean(err * err)),
        mae=mean(err),
        l1_rel=mean(err / g),
        l1_inv=mean(np.abs(1.0 / p - 1.0 / g)),
        delta1=frac(ratio < DELTA1_THRESHOLD),
        acc_001=frac(err < ACC_THRESHOLDS[0]),
        acc_005=frac(err < ACC_THRESHOLDS[1]),
        acc_010=frac(err < ACC_THRESHOLDS[2]),
    )
