import numpy as np
import pytest

from oar.errors import FractionOutOfRange
from oar.perturbation import (
    PerturbSpec,
    add_noise,
    add_outliers,
    bbox_diagonal,
    occlude,
    perturb,
    spec_from_manifest,
)
from oar.pointcloud_io import PointCloud
from oar.synthetic import bent_cylinder, fibonacci_sphere, make_benchmark, radial_warp, sinusoidal_warp


def cloud(n, seed=0):
    return PointCloud(np.random.default_rng(seed).uniform(-1, 1, size=(n, 3)))


def test_occlusion_count():
    out, removed = occlude(cloud(100), 0.25, seed=3)
    assert len(out) == 75 and len(removed) == 25


def test_occlusion_zero_is_identity():
    c = cloud(10)
    out, removed = occlude(c, 0.0)
    assert out is c and removed.size == 0


def test_occlusion_matches_sorted_distances():
    c = cloud(500, 1)
    for seed_point in (0, 17, 499):
        _, removed = occlude(c, 0.3, seed_point=seed_point)
        d2 = ((c.points - c.points[seed_point]) ** 2).sum(1)
        expected = np.sort(np.argsort(d2, kind="stable")[:150])
        np.testing.assert_array_equal(removed, expected)


def test_occlusion_keeps_order():
    c = cloud(50)
    out, removed = occlude(c, 0.2, seed=0)
    keep = np.setdiff1d(np.arange(50), removed)
    np.testing.assert_array_equal(out.points, c.points[keep])


@pytest.mark.parametrize("f", [-0.1, 1.0, 1.5])
def test_occlusion_fraction_out_of_range(f):
    with pytest.raises(FractionOutOfRange):
        occlude(cloud(10), f)
    with pytest.raises(FractionOutOfRange):
        PerturbSpec(occlusion_fraction=f)


def test_noise_std():
    c = cloud(100_000, 2)
    noisy = add_noise(c, 1.0, seed=4)
    expected = 0.01 * bbox_diagonal(c.points)
    std = (noisy.points - c.points).std()
    assert abs(std - expected) <= 0.02 * expected


def test_noise_zero_is_identity():
    c = cloud(5)
    assert add_noise(c, 0.0) is c


def test_outliers_inside_bbox():
    c = cloud(300, 3)
    out, idx = add_outliers(c, 2000, seed=5)
    assert len(out) == 2300
    np.testing.assert_array_equal(idx, np.arange(300, 2300))
    np.testing.assert_array_equal(out.points[:300], c.points)
    lo, hi = c.points.min(0), c.points.max(0)
    assert np.all(out.points >= lo) and np.all(out.points <= hi)


def test_perturb_manifest_replay():
    c = cloud(400, 6)
    spec = PerturbSpec(occlusion_fraction=0.2, noise_intensity_pct=0.5, outlier_count=30, seed=9)
    out, manifest = perturb(c, spec)
    assert manifest["input_points"] == 400 and manifest["output_points"] == 350
    assert len(manifest["removed_indices"]) == 80
    again, _ = perturb(c, spec_from_manifest(manifest))
    np.testing.assert_array_equal(again.points, out.points)
    other, _ = perturb(c, PerturbSpec(0.2, 0.5, 30, seed=10))
    assert not np.array_equal(other.points, out.points)


def test_fibonacci_sphere_on_unit_sphere():
    pts = fibonacci_sphere(1000)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    assert np.abs(pts.mean(0)).max() < 1e-2


def test_warps_are_smooth_and_bounded():
    pts = fibonacci_sphere(500)
    assert np.abs(sinusoidal_warp(pts, 0.1) - pts).max() <= 0.1 + 1e-12
    assert np.abs(radial_warp(pts, 0.15) - pts).max() <= 0.15 + 1e-12
    assert bent_cylinder(200).shape == (200, 3)


def test_make_benchmark():
    case = make_benchmark(n_points=500)
    assert len(case.source) == len(case.ground_truth) == 500
    assert len(case.target) == 400
    assert case.manifest["warp"] == "radial"
    with pytest.raises(ValueError):
        make_benchmark(n_points=100, warp="twist")
