import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from shapespec.geometry import (
    CloudError,
    PointCloud,
    arc_bend,
    bunny,
    center_of_mass,
    crescent,
    elongate,
    ellipsoid,
    farthest_point_order,
    gen_sphere_cloud,
    max_radius,
    mean_nn_spacing,
    fibonacci_sphere,
    mirror_points,
    normalize_to_unit_ball,
    ring_ellipsoid,
    rotate_points,
    weighted_bunny,
)
from shapespec.metrics import chamfer
from shapespec.rotation import quat_from_axis_angle

from conftest import ball_points, random_unit_quaternion

finite = st.floats(-10, 10, allow_nan=False)


def test_cloud_validation():
    with pytest.raises(CloudError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(CloudError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(CloudError):
        PointCloud(np.zeros((3, 3)), np.ones(2))
    with pytest.raises(CloudError):
        PointCloud([[0.0, np.nan, 0.0]])
    c = PointCloud(np.zeros((4, 3)))
    assert np.all(c.weights == 1.0)
    assert not c.points.flags.writeable


def test_center_of_mass_examples():
    assert np.allclose(center_of_mass(PointCloud([[1, 0, 0], [-1, 0, 0]])), 0.0)
    assert np.allclose(center_of_mass(PointCloud([[2, 2, 2]])), [2, 2, 2])


def test_center_of_mass_matches_per_axis_sum():
    cloud = gen_sphere_cloud(250, seed=0)
    ref = [math.fsum(cloud.points[:, k]) / len(cloud) for k in range(3)]
    assert np.max(np.abs(center_of_mass(cloud) - ref)) <= 1e-14


def test_normalize_examples(rng):
    c = PointCloud(ball_points(rng, 200) + 0.3)
    nc = normalize_to_unit_ball(c)
    assert abs(np.linalg.norm(nc.points, axis=1).max() - 1.0) <= 1e-12
    assert np.max(np.abs(nc.points.mean(axis=0))) <= 1e-12
    one = normalize_to_unit_ball(PointCloud([[3.0, 3.0, 3.0]]), 1.0)
    assert np.allclose(one.points, 0.0)
    assert np.allclose(nc.restore(), c.points)


def test_normalize_flags_out_of_ball(rng):
    pts = ball_points(rng, 300, radius=2.0)
    nc = normalize_to_unit_ball(PointCloud(pts), 1.0)
    scan = np.mean([np.dot(p, p) > 1.0 for p in nc.points])
    assert nc.out_of_ball_fraction == pytest.approx(scan)
    assert nc.out_of_ball_fraction > 0
    with pytest.raises(CloudError):
        normalize_to_unit_ball(PointCloud(pts), -1.0)


def test_rotate_points_examples(rng):
    c = PointCloud(ball_points(rng, 50))
    assert np.array_equal(rotate_points(c, [1, 0, 0, 0]).points, c.points)
    r = rotate_points(PointCloud([[1.0, 0, 0]]), quat_from_axis_angle([0, 0, 1], math.pi / 2))
    assert np.max(np.abs(r.points[0] - [0, 1, 0])) <= 1e-12


def test_rotation_preserves_pairwise_distances(rng):
    c = PointCloud(ball_points(rng, 80))
    r = rotate_points(c, random_unit_quaternion(rng))
    assert np.max(np.abs(pdist(c.points) - pdist(r.points))) <= 1e-12


def test_mirror_examples():
    c = PointCloud([[1.0, 2.0, 3.0]])
    assert np.array_equal(mirror_points(c, "x").points, [[-1.0, 2.0, 3.0]])
    b = bunny(500)
    assert np.array_equal(mirror_points(mirror_points(b, "y"), "y").points, b.points)
    assert chamfer(b, mirror_points(b)) > 0
    with pytest.raises(CloudError):
        mirror_points(c, "w")


@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=20), st.sampled_from("xyz"))
def test_mirror_is_involution(pts, axis):
    c = PointCloud(pts)
    assert np.array_equal(mirror_points(mirror_points(c, axis), axis).points, c.points)


def test_sphere_fixture_spacing_and_core():
    shell = fibonacci_sphere(250)
    d = mean_nn_spacing(shell)
    assert d == pytest.approx(0.21, abs=0.01)
    counts = []
    for seed in range(3):
        c = gen_sphere_cloud(250, seed=seed)
        core = c.points[250:]
        counts.append(len(core))
        assert pdist(core).min() >= d - 1e-9
    assert all(abs(n - 175) <= 0.15 * 175 for n in counts)


def test_sphere_fixture_is_deterministic():
    assert np.array_equal(gen_sphere_cloud(100, seed=3).points, gen_sphere_cloud(100, seed=3).points)


def test_elongate_examples(rng):
    c = PointCloud(ball_points(rng, 300))
    assert np.allclose(elongate(c, [0, 0, 1], 1.0).points, c.points)
    e = elongate(c, [0, 0, 1], 1.1)
    assert np.abs(e.points[:, 2]).max() == pytest.approx(1.1 * np.abs(c.points[:, 2]).max(), rel=1e-14)
    assert np.abs(e.points[:, 0]).max() == np.abs(c.points[:, 0]).max()
    e3 = ellipsoid(2000, 3.0, "z", seed=1)
    assert np.abs(e3.points[:, 2]).max() == pytest.approx(3.0, abs=0.05)
    assert np.abs(e3.points[:, 0]).max() <= 1.0
    with pytest.raises(CloudError):
        elongate(c, [0, 0, 2], 2.0)
    with pytest.raises(CloudError):
        elongate(c, "z", 0.0)


def test_arc_bend_flat_limit_and_quarter_arc(rng):
    c = PointCloud(ball_points(rng, 100))
    assert np.max(np.abs(arc_bend(c, 1e9, "y", "x").points - c.points)) <= 1e-6
    R = 2.0
    p = arc_bend(PointCloud([[0.0, math.pi * R / 2, 0.0]]), R, along="y", toward="x").points[0]
    # the quarter-arc point moves R toward x and ends R along y
    assert p == pytest.approx([R, R, 0.0], abs=1e-12)


def test_crescent_matches_independent_transform():
    n = 400
    c = crescent(n, seed=7, variant="side", weighted=True, symmetrize=False, normalize=False)
    # second implementation: elongate z by 3 and bend toward x with R = 2
    r2 = np.random.default_rng(7)
    d = r2.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * r2.random(n)[:, None] ** (1.0 / 3.0)
    pts[:, 2] *= 3.0
    th = pts[:, 2] / 2.0
    ref = np.column_stack([pts[:, 0] + 2.0 * (1 - np.cos(th)), pts[:, 1], 2.0 * np.sin(th)])
    assert np.max(np.abs(c.points - ref)) <= 1e-12
    assert set(np.unique(c.weights)) == {1.0, 2.0}


def test_crescent_symmetrized_mirror_axis():
    c = crescent(1000, seed=0, variant="side", normalize=False)
    m = mirror_points(c, "y")
    assert chamfer(c, m) <= 1e-20


def test_weighted_bunny_rule():
    wb = weighted_bunny(1500, seed=2)
    z = wb.points[:, 2]
    assert z.max() == pytest.approx(3.5)
    assert np.array_equal(wb.weights, np.where(z >= 2.75, 1.0, 2.0))
    assert 0 < np.mean(wb.weights == 1.0) < 0.5


def test_bunny_is_chiral_and_normalized():
    b = bunny(1500)
    assert max_radius(b) <= 1.0 + 1e-9
    assert chamfer(b, mirror_points(b, "x")) > 1e-3


def test_ring_ellipsoid_structure():
    c = ring_ellipsoid(32, n_theta=8, n_shells=2, elongation=2.0, axis="z", jitter=False)
    assert len(c) == 32 * 8 * 2
    assert np.all(c.weights > 0)
    assert abs(np.mean(c.weights) - 1.0) < 1e-12


def test_farthest_point_order_is_spread(rng):
    pts = ball_points(rng, 500)
    idx = farthest_point_order(pts, 20)
    assert len(set(idx.tolist())) == 20
    assert pdist(pts[idx]).min() > pdist(pts[:20]).min()
