import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semfusion import geometry as geo
from semfusion.errors import ConfigError, NonPositiveDepth

INTR = geo.Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def test_project_examples():
    assert geo.project(INTR, (0, 0, 2)) == (320.0, 240.0)
    assert geo.project(INTR, (0.4, 0, 2)) == pytest.approx((420.0, 240.0), abs=1e-12)
    assert geo.project(INTR, (0, 0, -1)) is None
    assert geo.project(INTR, (0, 0, geo.Z_MIN)) is None


def test_back_project_examples():
    np.testing.assert_allclose(geo.back_project(INTR, (320, 240), 2.0), [0, 0, 2])
    np.testing.assert_allclose(geo.back_project(INTR, (420, 240), 2.0), [0.4, 0, 2], atol=1e-15)
    with pytest.raises(NonPositiveDepth):
        geo.back_project(INTR, (320, 240), 0.0)
    with pytest.raises(NonPositiveDepth):
        geo.back_project(INTR, (320, 240), -1.0)


def test_intrinsics_validation():
    with pytest.raises(ConfigError):
        geo.Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ConfigError):
        geo.Intrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)


def test_kinect_defaults_and_scaling():
    k = geo.Intrinsics.kinect()
    assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == (525.0, 525.0, 319.5, 239.5, 640, 480)
    half = k.scaled(320, 240)
    assert (half.fx, half.fy, half.cx, half.cy) == (262.5, 262.5, 159.5, 119.5)
    # the same ray hits corresponding pixel centres at both resolutions
    p = geo.back_project(k, (100.5, 50.5), 3.0)
    u, v = geo.project(half, p)
    assert (u, v) == pytest.approx((50.0, 25.0), abs=1e-12)


def test_intrinsics_file_round_trip(tmp_path):
    f = tmp_path / "intrinsics.txt"
    k = geo.Intrinsics.kinect().scaled(320, 240)
    k.to_file(f)
    assert geo.Intrinsics.from_file(f) == k
    f.write_text("fx=1\nfy=1\n")
    with pytest.raises(ConfigError):
        geo.Intrinsics.from_file(f)


def test_invert_examples():
    ident = geo.Pose.identity()
    assert geo.invert(ident).allclose(ident)
    t = geo.Pose(np.eye(3), [0, 0, 1])
    np.testing.assert_allclose(geo.invert(t).translation, [0, 0, -1])
    p = geo.Pose(geo.rotation_about([0, 0, 1], math.pi / 2), [1, 0, 0])
    # matrix-inverse oracle
    np.testing.assert_allclose(geo.invert(p).matrix(), np.linalg.inv(p.matrix()), atol=1e-12)
    assert geo.compose(p, geo.invert(p)).allclose(ident)


def test_transform_examples():
    np.testing.assert_array_equal(geo.transform(geo.Pose.identity(), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(geo.transform(geo.Pose(np.eye(3), [0, 0, 1]), [0, 0, 0]), [0, 0, 1])
    r = geo.Pose(geo.rotation_about([0, 0, 1], math.pi), [0, 0, 0])
    np.testing.assert_allclose(geo.transform(r, [1, 0, 0]), [-1, 0, 0], atol=1e-12)


def test_pose_rejects_improper_rotation():
    with pytest.raises(ValueError):
        geo.Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        geo.Pose(np.eye(3) * 1.01, np.zeros(3))


def test_quaternion_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(200):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[3] < 0:
            q = -q
        np.testing.assert_allclose(geo.matrix_to_quaternion(geo.quaternion_to_matrix(q)), q, atol=1e-12)


unit = st.floats(-1, 1)
angles = st.floats(-math.pi, math.pi)
coords = st.floats(-10, 10)


def pose_from(ax, ay, az, angle, t):
    axis = np.array([ax, ay, az])
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([0.0, 0.0, 1.0])
    return geo.Pose(geo.rotation_about(axis, angle), t)


poses = st.builds(pose_from, unit, unit, unit, angles, st.tuples(coords, coords, coords))


@given(st.floats(0, 639), st.floats(0, 479), st.floats(0.1, 8.0, exclude_min=True))
def test_project_back_project_round_trip(u, v, d):
    k = geo.Intrinsics.kinect()
    uu, vv = geo.project(k, geo.back_project(k, (u, v), d))
    assert abs(uu - u) <= 1e-9 and abs(vv - v) <= 1e-9


@given(poses)
def test_double_inverse(p):
    assert geo.invert(geo.invert(p)).allclose(p)


@given(poses, st.tuples(coords, coords, coords))
def test_transform_inverse_round_trip(p, x):
    back = geo.transform(p, geo.transform(geo.invert(p), x))
    np.testing.assert_allclose(back, x, rtol=0, atol=1e-9)


@given(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 10)), st.floats(0.01, 100))
def test_projection_scale_consistent(p, k):
    a = geo.project(INTR, p)
    b = geo.project(INTR, tuple(k * c for c in p))
    assert a == pytest.approx(b, abs=1e-9)


def test_vectorised_projection_matches_scalar():
    rng = np.random.default_rng(0)
    pts = rng.uniform([-2, -2, -1], [2, 2, 5], (500, 3))
    u, v, z, front = geo.project_points(INTR, pts)
    for i, p in enumerate(pts):
        s = geo.project(INTR, p)
        assert (s is not None) == front[i]
        if s is not None:
            assert (u[i], v[i]) == pytest.approx(s, abs=1e-9)


def test_back_project_image_matches_scalar():
    k = geo.Intrinsics(8.0, 9.0, 2.5, 1.5, 6, 4)
    depth = np.arange(1, 25, dtype=float).reshape(4, 6) / 4
    img = geo.back_project_image(k, depth)
    for v in range(4):
        for u in range(6):
            np.testing.assert_allclose(img[v, u], geo.back_project(k, (u, v), depth[v, u]), atol=1e-15)


def test_pixel_index_rounds_half_up():
    iu, iv = geo.to_pixel_index(np.array([319.5, 319.49, -0.5, -0.51]), np.array([0.0, 0.0, 0.0, 0.0]))
    assert iu.tolist() == [320, 319, 0, -1]
