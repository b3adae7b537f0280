"""Occlusion, noise and outlier injection with replayable manifests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyCloud, FractionOutOfRange
from .pointcloud_io import PointCloud
from .spatial import SpatialIndex


@dataclass(frozen=True)
class PerturbSpec:
    occlusion_fraction: float = 0.0
    noise_intensity_pct: float = 0.0
    outlier_count: int = 0
    seed: int = 0
    seed_point: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise FractionOutOfRange(f"occlusion fraction must lie in [0, 1), got {self.occlusion_fraction}")
        if self.noise_intensity_pct < 0:
            raise ValueError("noise intensity must be non-negative")
        if self.outlier_count < 0:
            raise ValueError("outlier count must be non-negative")


def bbox_diagonal(points: np.ndarray) -> float:
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def occlude(cloud: PointCloud, fraction: float, seed: int = 0,
            seed_point: int | None = None) -> tuple[PointCloud, np.ndarray]:
    """Remove the ``ceil(fraction * N)`` points nearest a random seed point.

    Returns the surviving cloud (original order kept) and the sorted removed
    indices. ``seed_point`` fixes the crop centre instead of drawing it.
    """
    if not 0.0 <= fraction < 1.0:
        raise FractionOutOfRange(f"occlusion fraction must lie in [0, 1), got {fraction}")
    pts = cloud.points
    n = len(pts)
    n_remove = math.ceil(fraction * n - 1e-9)
    if n_remove == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    if n_remove >= n:
        raise EmptyCloud(f"occluding {fraction:.3g} of {n} points leaves nothing")
    if seed_point is None:
        seed_point = int(np.random.default_rng(seed).integers(n))
    idx, _ = SpatialIndex(pts).knn_many(pts[seed_point], n_remove)
    removed = np.sort(idx[0])
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    return PointCloud(pts[keep], frame=cloud.frame), removed


def add_noise(cloud: PointCloud, intensity_pct: float, seed: int = 0) -> PointCloud:
    """Gaussian jitter with std ``intensity_pct`` percent of the bbox diagonal."""
    if intensity_pct < 0:
        raise ValueError("noise intensity must be non-negative")
    if intensity_pct == 0:
        return cloud
    std = intensity_pct / 100.0 * bbox_diagonal(cloud.points)
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0.0, std, size=cloud.points.shape), frame=cloud.frame)


def add_outliers(cloud: PointCloud, count: int, seed: int = 0) -> tuple[PointCloud, np.ndarray]:
    """Append ``count`` points drawn uniformly in the axis-aligned bounding box."""
    if count < 0:
        raise ValueError("outlier count must be non-negative")
    n = len(cloud)
    if count == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    rng = np.random.default_rng(seed)
    extra = lo + (hi - lo) * rng.random((count, 3))
    return (PointCloud(np.vstack([cloud.points, extra]), frame=cloud.frame),
            np.arange(n, n + count, dtype=np.int64))


def stage_seeds(seed: int) -> tuple[int, int, int]:
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1, np.uint64)[0]) for c in children)


def perturb(cloud: PointCloud, spec: PerturbSpec) -> tuple[PointCloud, dict]:
    """Apply occlusion, then noise, then outliers; returns the cloud and a manifest.

    Each stage draws from its own stream derived from ``spec.seed``.
    """
    s_occ, s_noise, s_out = stage_seeds(spec.seed)
    out, removed = occlude(cloud, spec.occlusion_fraction, s_occ, spec.seed_point)
    out = add_noise(out, spec.noise_intensity_pct, s_noise)
    out, outliers = add_outliers(out, spec.outlier_count, s_out)
    manifest = {
        "spec": asdict(spec),
        "input_points": len(cloud),
        "output_points": len(out),
        "removed_indices": removed.tolist(),
        "outlier_indices": outliers.tolist(),
    }
    return out, manifest


def spec_from_manifest(manifest: dict) -> PerturbSpec:
    return PerturbSpec(**manifest["spec"])
