"""Registration accuracy metrics against an index-aligned ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .errors import SizeMismatch
from .pointcloud_io import PointCloud, normalize

DEFAULT_THRESHOLDS = (0.025, 0.05, 0.3)


@dataclass
class Metrics:
    epe: float
    acc_s: float
    acc_r: float
    outlier: float
    epe_mean_norm: float
    per_point_errors: np.ndarray = field(repr=False)
    frame: str = "normalized_by_gt"
    thresholds: tuple[float, float, float] = DEFAULT_THRESHOLDS

    def to_dict(self, include_errors: bool = False) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        errors = d.pop("per_point_errors")
        if include_errors:
            d["per_point_errors"] = [float(e) for e in errors]
        return d

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("indent", 2)
        return json.dumps(self.to_dict(), **kwargs)


def _pts(x) -> np.ndarray:
    return np.asarray(x.points if isinstance(x, PointCloud) else x, dtype=np.float64)


def evaluate(pred, gt, frame: Literal["normalized_by_gt", "raw"] = "normalized_by_gt",
             thresholds=DEFAULT_THRESHOLDS) -> Metrics:
    """EPE, AccS, AccR and outlier ratio for row-aligned clouds.

    EPE is the Frobenius norm of the error matrix divided by N; the mean of
    per-point error norms is reported separately as ``epe_mean_norm``.
    Percentages count points with error below the strict/relaxed thresholds
    and above the outlier threshold.
    """
    p, g = _pts(pred), _pts(gt)
    if p.shape != g.shape:
        raise SizeMismatch(f"prediction has {len(p)} points, ground truth {len(g)}")
    if frame == "normalized_by_gt":
        gt_cloud = gt if isinstance(gt, PointCloud) else PointCloud(g)
        _, tf = normalize(gt_cloud)
        p, g = tf.apply(p), tf.apply(g)
    elif frame != "raw":
        raise ValueError(f"unknown frame {frame!r}")
    strict, relaxed, outlier = (float(t) for t in thresholds)
    diff = p - g
    errors = np.sqrt((diff * diff).sum(axis=1))
    n = len(errors)
    return Metrics(
        epe=float(np.sqrt((diff * diff).sum()) / n),
        acc_s=float(np.count_nonzero(errors < strict) * 100.0 / n),
        acc_r=float(np.count_nonzero(errors < relaxed) * 100.0 / n),
        outlier=float(np.count_nonzero(errors > outlier) * 100.0 / n),
        epe_mean_norm=float(errors.mean()),
        per_point_errors=errors,
        frame=frame,
        thresholds=(strict, relaxed, outlier),
    )


def write_errors_csv(metrics: Metrics, path) -> None:
    with open(path, "w") as fh:
        fh.write("index,error\n")
        for i, e in enumerate(metrics.per_point_errors):
            fh.write(f"{i},{e!r}\n")
