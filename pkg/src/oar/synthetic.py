"""Parametric source shapes and smooth warps for desk-scale benchmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud_io import PointCloud
from .perturbation import PerturbSpec, perturb


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """Near-uniform deterministic samples on a sphere."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = np.pi * (1.0 + 5.0 ** 0.5) * i
    return radius * np.column_stack([
        np.cos(azimuth) * np.sin(polar),
        np.sin(azimuth) * np.sin(polar),
        np.cos(polar),
    ])


def bent_cylinder(n: int, radius: float = 0.3, length: float = 2.0, bend: float = 0.4,
                  seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    s = rng.uniform(-0.5, 0.5, n) * length
    return np.column_stack([
        radius * np.cos(theta) + bend * s ** 2,
        radius * np.sin(theta),
        s,
    ])


def sinusoidal_warp(points: np.ndarray, amplitude: float = 0.1, frequency: float = 2.0) -> np.ndarray:
    """Smooth cyclic warp ``p + a * (sin(f y), sin(f z), sin(f x))``."""
    x, y, z = points.T
    return points + amplitude * np.column_stack([
        np.sin(frequency * y), np.sin(frequency * z), np.sin(frequency * x)])


def radial_warp(points: np.ndarray, amplitude: float = 0.15, frequency: float = 2.0) -> np.ndarray:
    """Scale each point radially by ``1 + a * sin(f x) * cos(f y)``.

    Unlike the cyclic warp, the motion is normal to a sphere, so it is
    observable from unlabelled point sets.
    """
    x, y, _ = points.T
    return points * (1.0 + amplitude * np.sin(frequency * x) * np.cos(frequency * y))[:, None]


WARPS = {"radial": radial_warp, "sinusoidal": sinusoidal_warp}


@dataclass
class BenchmarkCase:
    source: PointCloud       # complete undeformed shape
    ground_truth: PointCloud  # complete warped shape, index-aligned with source
    target: PointCloud       # warped, then perturbed
    manifest: dict


def make_benchmark(n_points: int = 3000, shape: str = "sphere", warp: str = "radial",
                   amplitude: float = 0.15, frequency: float = 2.0,
                   perturb_spec: PerturbSpec | None = None, seed: int = 0) -> BenchmarkCase:
    """Source shape, its warped copy, and a perturbed target (20% occlusion by default)."""
    if shape == "sphere":
        src = fibonacci_sphere(n_points)
    elif shape == "cylinder":
        src = bent_cylinder(n_points, seed=seed)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    if warp not in WARPS:
        raise ValueError(f"unknown warp {warp!r}")
    gt = WARPS[warp](src, amplitude, frequency)
    spec = perturb_spec or PerturbSpec(occlusion_fraction=0.2, seed=seed)
    target, manifest = perturb(PointCloud(gt), spec)
    manifest.update(shape=shape, warp=warp, n_points=n_points, amplitude=amplitude, frequency=frequency)
    return BenchmarkCase(PointCloud(src), PointCloud(gt), target, manifest)
