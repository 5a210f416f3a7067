from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dotstereo.geometry import (CameraModel, PointCloud, Ray, StereoCalibration, SurfaceGrid,
                                intersect_analytic, intersect_midpoint, is_rectified,
                                pixel_to_ray, reconstruct, reconstruct_disparity, triangulate,
                                upsample_surface)


@dataclass
class Pairs:
    """Minimal correspondence list: pixel pairs and colours."""

    left_xy: np.ndarray
    right_xy: np.ndarray
    color: np.ndarray

    def __len__(self):
        return len(self.left_xy)


def _rig(baseline=100.0, f=1000.0):
    left = CameraModel.looking_from((0, 0, 0), f, cx=320, cy=240, width=640, height=480)
    right = CameraModel.looking_from((baseline, 0, 0), f, cx=320, cy=240, width=640, height=480)
    return left, right


def _pairs_for(points, left, right):
    X = np.asarray(points, dtype=float)
    return Pairs(left.project(X), right.project(X), np.zeros(len(X), np.int8))


def _rotation(ax, ay, az):
    cx, sx, cy, sy, cz, sz = (math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay),
                              math.cos(az), math.sin(az))
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


# -- cameras and rays ------------------------------------------------------------------


def test_principal_point_ray_is_the_optical_axis():
    cam, _ = _rig()
    ray = pixel_to_ray(cam, (320, 240))
    assert np.allclose(ray.direction, [0, 0, 1]) and np.allclose(ray.origin, 0)
    side = pixel_to_ray(cam, (320 + 1000, 240))
    assert np.allclose(side.direction, np.array([1, 0, 1]) / math.sqrt(2))


def test_rotated_camera_rays_point_through_the_scene():
    R = _rotation(0.1, -0.2, 0.05)
    cam = CameraModel.looking_from((10, -5, 3), 800, cx=300, cy=200, rotation=R)
    X = np.array([40.0, 25.0, 900.0])
    ray = pixel_to_ray(cam, cam.project(X))
    t = (X - ray.origin) @ ray.direction
    assert np.allclose(ray.at(t), X, atol=1e-9)


@given(st.floats(-200, 200), st.floats(-200, 200), st.floats(300, 3000),
       st.tuples(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3)))
def test_project_and_cast_round_trip(x, y, z, angles):
    cam = CameraModel.looking_from((5, -3, 0), 1500, 1480, 640, 480, rotation=_rotation(*angles))
    X = cam.centre + _rotation(*angles).T @ np.array([x, y, z])
    uv = cam.project(X)
    d = cam.directions(uv)
    t = (X - cam.centre) @ d
    assert np.linalg.norm(cam.centre + t * d - X) <= 1e-9 * max(1.0, np.linalg.norm(X))


def test_points_behind_the_camera_project_to_nan():
    cam, _ = _rig()
    assert np.isnan(cam.project(np.array([0.0, 0.0, -5.0]))).all()


def test_camera_validation_and_json():
    with pytest.raises(ValueError, match="focal"):
        CameraModel(0, 1, 0, 0)
    with pytest.raises(ValueError, match="orthonormal"):
        CameraModel(1, 1, 0, 0, rotation=np.diag([1.0, 2.0, 1.0]))
    with pytest.raises(ValueError, match="proper"):
        CameraModel(1, 1, 0, 0, rotation=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError, match="zero"):
        Ray([0, 0, 0], [0, 0, 0])
    left, right = _rig()
    calib = StereoCalibration.from_json(StereoCalibration(left, right).to_json())
    assert np.array_equal(calib.right.centre, right.centre) and calib.left.size == (640, 480)
    with pytest.raises(ValueError, match="'fy'"):
        CameraModel.from_dict({"fx": 1, "cx": 0, "cy": 0})
    with pytest.raises(ValueError, match="'right'"):
        StereoCalibration.from_json('{"left": {}}')
    with pytest.raises(ValueError, match="malformed"):
        StereoCalibration.from_json("[")


# -- intersection ------------------------------------------------------------------


@pytest.mark.parametrize("intersect", [intersect_analytic, intersect_midpoint])
def test_rays_meeting_at_a_point(intersect):
    X = np.array([10.0, 20.0, 500.0])
    r1 = Ray([-30, 0, 0], X - [-30, 0, 0])
    r2 = Ray([30, 0, 0], X - [30, 0, 0])
    p, gap = intersect(r1, r2)
    assert np.allclose(p, X, atol=1e-9) and gap < 1e-9


@pytest.mark.parametrize("intersect", [intersect_analytic, intersect_midpoint])
def test_skew_rays_give_the_midpoint(intersect):
    p, gap = intersect(Ray([-5, 0, 0], [1, 0, 0]), Ray([0, -5, 2], [0, 1, 0]))
    assert np.allclose(p, [0, 0, 1], atol=1e-12) and gap == pytest.approx(2.0)


@pytest.mark.parametrize("intersect", [intersect_analytic, intersect_midpoint])
def test_parallel_rays_raise(intersect):
    with pytest.raises(ValueError, match="degenerate"):
        intersect(Ray([0, 0, 0], [0, 0, 1]), Ray([10, 0, 0], [0, 0, 2]))
    with pytest.raises(ValueError, match="degenerate"):
        intersect(Ray([0, 0, 0], [0, 0, 1]), Ray([10, 0, 0], [0, 0, -1]))


@given(st.lists(st.floats(-1, 1), min_size=12, max_size=12))
def test_both_intersections_agree(v):
    o1, d1, o2, d2 = (np.array(v[i:i + 3]) for i in range(0, 12, 3))
    o2 = o2 * 100.0
    n = np.cross(d1, d2)
    if min(np.linalg.norm(d1), np.linalg.norm(d2)) < 1e-3:
        return
    if np.linalg.norm(n) < 1e-2 * np.linalg.norm(d1) * np.linalg.norm(d2):
        return
    pa, ga = intersect_analytic(Ray(o1, d1), Ray(o2, d2))
    pm, gm = intersect_midpoint(Ray(o1, d1), Ray(o2, d2))
    assert np.allclose(pa, pm, atol=1e-8) and ga == pytest.approx(gm, abs=1e-8)
    # the connecting segment is perpendicular to both rays
    r1, r2 = Ray(o1, d1), Ray(o2, d2)
    c1 = r1.at((pa - r1.origin) @ r1.direction)
    assert np.linalg.norm(c1 - pa) == pytest.approx(ga / 2, abs=1e-8)


def test_batch_triangulation_matches_scalar():
    left, right = _rig()
    rng = np.random.default_rng(0)
    X = rng.uniform([-100, -100, 600], [100, 100, 1200], (50, 3))
    uvl, uvr = left.project(X), right.project(X)
    for method, scalar in (("analytic", intersect_analytic), ("midpoint", intersect_midpoint)):
        pts, res, ok = triangulate(left, right, uvl, uvr, method)
        assert ok.all() and np.allclose(pts, X, atol=1e-9) and res.max() < 1e-9
        one, _ = scalar(pixel_to_ray(left, uvl[7]), pixel_to_ray(right, uvr[7]))
        assert np.allclose(one, pts[7], atol=1e-9)
    with pytest.raises(ValueError, match="unknown"):
        triangulate(left, right, uvl, uvr, "dlt")


# -- reconstruction ----------------------------------------------------------------


def test_reconstruct_methods_agree():
    left, right = _rig()
    X = np.random.default_rng(1).uniform([-100, -100, 600], [100, 100, 1200], (80, 3))
    corr = _pairs_for(X, left, right)
    corr.left_xy += np.random.default_rng(2).normal(0, 0.3, corr.left_xy.shape)
    a = reconstruct(corr, left, right, "analytic")
    m = reconstruct(corr, left, right, "midpoint")
    assert len(a) == len(m) == 80
    assert np.allclose(a.xyz, m.xyz, atol=1e-9) and np.allclose(a.residual, m.residual, atol=1e-9)


def test_residual_gate_drops_inconsistent_pairs():
    left, right = _rig()
    X = np.array([[0.0, 0.0, 800.0], [10.0, 5.0, 900.0]])
    corr = _pairs_for(X, left, right)
    corr.right_xy[1, 1] += 40.0  # off the epipolar line
    cloud = reconstruct(corr, left, right)
    assert len(cloud) == 1 and cloud.dropped == 1 and cloud.source_index.tolist() == [0]


def test_zero_baseline_gives_an_empty_cloud_with_a_warning():
    left, _ = _rig()
    X = np.array([[0.0, 0.0, 800.0], [10.0, 5.0, 900.0]])
    corr = _pairs_for(X, left, left)
    with pytest.warns(RuntimeWarning, match="degenerate"):
        cloud = reconstruct(corr, left, left)
    assert len(cloud) == 0 and cloud.dropped == 2


def test_disparity_depth_example():
    left, right = _rig(100.0, 1000.0)
    corr = Pairs(np.array([[370.0, 240.0], [300.0, 240.0]]),
                 np.array([[320.0, 240.0], [300.0, 240.0]]), np.zeros(2, np.int8))
    cloud = reconstruct_disparity(corr, left, right)
    assert len(cloud) == 1 and cloud.dropped == 1
    assert np.allclose(cloud.xyz[0], [100.0, 0.0, 2000.0])


def test_disparity_matches_rays_on_exact_pixels():
    left, right = _rig(60.0, 2400.0)
    X = np.random.default_rng(3).uniform([-50, -50, 700], [50, 50, 900], (40, 3))
    corr = _pairs_for(X, left, right)
    assert np.allclose(reconstruct_disparity(corr, left, right).xyz, X, atol=1e-9)


def test_disparity_requires_rectification():
    left, _ = _rig()
    tilted = CameraModel.looking_from((100, 0, 0), 1000, cx=320, cy=240,
                                      rotation=_rotation(0, 0.05, 0))
    assert is_rectified(left, _rig()[1]) and not is_rectified(left, tilted)
    corr = Pairs(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1, np.int8))
    with pytest.raises(ValueError, match="rectified"):
        reconstruct_disparity(corr, left, tilted)


# -- clouds and surfaces -------------------------------------------------------------


def _cloud():
    xyz = np.array([[0.1, -2.5, 800.0], [1e-3, 3.0, 801.25], [7.0, 7.0, 799.5]])
    return PointCloud(xyz, [0, 1, 2], [0.01, 0.02, 0.0])


def test_ply_round_trip():
    c = _cloud()
    back = PointCloud.from_ply(c.to_ply())
    assert np.array_equal(back.xyz, c.xyz) and np.array_equal(back.color, c.color)
    with pytest.raises(ValueError):
        PointCloud.from_ply("not a ply")


def test_csv_output():
    rows = _cloud().to_csv().strip().splitlines()
    assert rows[0] == "x,y,z,color,residual" and rows[2].startswith("0.001,3.0,801.25,green")


def test_upsampled_affine_surface_is_exact():
    rng = np.random.default_rng(4)
    xy = rng.uniform(-50, 50, (300, 2))
    z = 800.0 + 0.1 * xy[:, 0] - 0.06 * xy[:, 1]
    grid = upsample_surface(PointCloud(np.column_stack([xy, z]), np.zeros(300), np.zeros(300)), 2.0)
    gx, gy = grid.coords()
    X, Y = np.meshgrid(gx, gy)
    ok = ~grid.holes
    assert ok.mean() > 0.5
    assert np.allclose(grid.z[ok], (800.0 + 0.1 * X - 0.06 * Y)[ok], atol=1e-9)


def test_upsampled_grid_node_at_a_site_is_exact():
    xy = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [4.0, 6.0]])
    z = np.array([1.0, 2.0, 3.0, 4.0, 123.456])
    grid = upsample_surface(PointCloud(np.column_stack([xy, z]), np.zeros(5), np.zeros(5)), 2.0)
    assert grid.z[3, 2] == 123.456 and grid.z[0, 0] == 1.0


def test_upsampled_sphere_stays_within_the_interpolation_bound():
    R, h = 85.0, 5.0
    g = np.arange(-45.0, 45.01, h)
    X, Y = np.meshgrid(g, g)
    keep = X ** 2 + Y ** 2 <= 45.0 ** 2
    xy = np.column_stack([X[keep], Y[keep]])
    z = 800.0 - np.sqrt(R * R - np.sum(xy ** 2, axis=1))
    grid = upsample_surface(PointCloud(np.column_stack([xy, z]), np.zeros(len(z)),
                                       np.zeros(len(z))), 1.0)
    gx, gy = grid.coords()
    GX, GY = np.meshgrid(gx, gy)
    r2 = GX ** 2 + GY ** 2
    sel = ~grid.holes & (r2 <= 40.0 ** 2)
    truth = 800.0 - np.sqrt(R * R - r2[sel])
    # linear interpolation on right triangles of leg h: error <= M h^2 / 4,
    # M the largest Hessian eigenvalue of the cap height within the hull
    M = R * R / (R * R - 45.0 ** 2) ** 1.5
    err = np.abs(grid.z[sel] - truth)
    assert err.max() <= M * h * h / 4
    assert err.max() > 0  # the cap is curved, so a plane cannot fit it


def test_surface_grid_csv_round_trip_and_validation():
    grid = SurfaceGrid(-1.5, 2.0, 0.5, 3, 2, [[1.0, np.nan, 2.0], [3.0, 4.0, 5.5]])
    back = SurfaceGrid.from_csv(grid.to_csv())
    assert (back.x0, back.y0, back.spacing, back.nx, back.ny) == (-1.5, 2.0, 0.5, 3, 2)
    assert np.array_equal(back.holes, grid.holes) and np.array_equal(back.z[~back.holes], [1, 2, 3, 4, 5.5])
    with pytest.raises(ValueError):
        SurfaceGrid(0, 0, 0, 1, 1, [[0.0]])
    with pytest.raises(ValueError):
        upsample_surface(_cloud(), -1.0)
