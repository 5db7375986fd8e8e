import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from egfs_loc.geometry import (
    CameraIntrinsics,
    Pose,
    backproject,
    dummy_coordinate,
    hat,
    look_at,
    pose_compose,
    pose_inverse,
    project,
    project_points,
    quat_to_rotation,
    reprojection_error,
    reprojection_errors,
    rotation_to_quat,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)


@pytest.fixture
def k100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture
def k500():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def rz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def random_pose(rng, angle_max=3.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0.01, angle_max) / np.linalg.norm(w)
    return Pose(so3_exp(w), rng.normal(size=3))


def oracle_project(y, h, k):
    """Homogeneous 4x4 inverse, independent of the package's world_to_camera."""
    m = np.linalg.inv(h.matrix()) @ np.append(y, 1.0)
    x = k.matrix @ m[:3]
    return x[:2] / x[2]


# --------------------------------------------------------------- project


def test_project_on_axis(k100):
    np.testing.assert_allclose(project([0, 0, 1], Pose.identity(), k100), [50, 50])


def test_project_offset(k100):
    np.testing.assert_allclose(project([0.5, 0, 1], Pose.identity(), k100), [100, 50])


def test_project_rotated_matches_frozen_oracle(k500):
    # value from a hand-rolled pure-Python projection (no numpy), frozen here
    h = Pose(rz(30), [0.1, -0.2, 0.3])
    uv = project([1.0, 2.0, 3.0], h, k500)
    assert uv[0] == pytest.approx(668.0412710011101, abs=1e-9)
    assert uv[1] == pytest.approx(509.49183117143804, abs=1e-9)


def test_project_behind_camera_is_none(k100):
    assert project([0, 0, -1], Pose.identity(), k100) is None
    assert project([0, 0, 0.05], Pose.identity(), k100) is None
    uv, ok = project_points(np.array([[0, 0, -1.0], [0, 0, 2.0]]), Pose.identity(), k100)
    assert ok.tolist() == [False, True]
    assert np.isnan(uv[0]).all()


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 9, 1, 4, 4)


# ----------------------------------------------------- reprojection error


def test_three_four_five(k100):
    assert reprojection_error([53, 54], [0, 0, 1], Pose.identity(), k100) == pytest.approx(5.0)


def test_self_projection_is_zero(k500):
    rng = np.random.default_rng(3)
    h = random_pose(rng)
    y = h.apply(np.array([0.3, -0.2, 4.0]))
    assert reprojection_error(project(y, h, k500), y, h, k500) == pytest.approx(0.0, abs=1e-9)


def test_reprojection_matches_oracle_on_random_instances(k500):
    rng = np.random.default_rng(7)
    for _ in range(200):
        h = random_pose(rng)
        y = h.apply(np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 8)]))
        p = rng.uniform(0, 640, 2)
        expect = np.linalg.norm(p - oracle_project(y, h, k500))
        assert reprojection_error(p, y, h, k500) == pytest.approx(expect, abs=1e-9)


def test_reprojection_behind_is_none(k100):
    assert reprojection_error([50, 50], [0, 0, -2], Pose.identity(), k100) is None
    e = reprojection_errors(np.array([[50, 50.0]]), np.array([[0, 0, -2.0]]), Pose.identity(), k100)
    assert np.isnan(e[0])


def test_reprojection_gauge_invariance(k500):
    # moving world and camera by the same rigid transform changes nothing
    rng = np.random.default_rng(11)
    h = random_pose(rng)
    g = random_pose(rng)
    pts = h.apply(np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), rng.uniform(1, 5, 50)]))
    px = rng.uniform(0, 600, (50, 2))
    a = reprojection_errors(px, pts, h, k500)
    b = reprojection_errors(px, g.apply(pts), pose_compose(g, h), k500)
    np.testing.assert_allclose(a, b, atol=1e-8)


# ------------------------------------------------------------ back-project


def test_dummy_on_principal_ray(k100):
    np.testing.assert_allclose(dummy_coordinate([50, 50], Pose.identity(), k100), [0, 0, 10])
    np.testing.assert_allclose(dummy_coordinate([150, 50], Pose.identity(), k100), [10, 0, 10])


def test_dummy_round_trip(k500):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        h = random_pose(rng)
        p = rng.uniform([0, 0], [640, 480])
        y = dummy_coordinate(p, h, k500)
        worst = max(worst, np.linalg.norm(oracle_project(y, h, k500) - p))
        depth = (np.linalg.inv(h.matrix()) @ np.append(y, 1))[2]
        assert depth == pytest.approx(10.0, abs=1e-9)
    assert worst < 1e-6


def test_backproject_batch(k500):
    px = np.array([[320.0, 240.0], [820.0, 240.0]])
    np.testing.assert_allclose(backproject(px, 2.0, Pose.identity(), k500), [[0, 0, 2], [2, 0, 2]])


# ------------------------------------------------------------------ poses


def test_compose_with_inverse_is_identity():
    h = random_pose(np.random.default_rng(0))
    m = pose_compose(h, pose_inverse(h)).matrix()
    np.testing.assert_allclose(m, np.eye(4), atol=1e-12)


def test_compose_order():
    a = Pose(rz(90), [1, 0, 0])
    b = Pose(np.eye(3), [0, 1, 0])
    # b first, then a
    np.testing.assert_allclose(pose_compose(a, b).apply(np.zeros(3)), a.apply(b.apply(np.zeros(3))))


def test_pose_arrays_are_read_only():
    h = Pose.identity()
    with pytest.raises(ValueError):
        h.rotation[0, 0] = 2.0


def test_pose_validity():
    assert Pose(rz(10), [1, 2, 3]).is_valid()
    assert not Pose(2 * np.eye(3)).is_valid()
    assert not Pose(np.diag([1.0, 1.0, -1.0])).is_valid()


def test_look_at_points_optical_axis_at_target(k500):
    h = look_at([3.0, 1.0, 1.5], [0.0, 0.0, 1.0])
    assert h.is_valid()
    np.testing.assert_allclose(project([0.0, 0.0, 1.0], h, k500), [320, 240], atol=1e-9)


# -------------------------------------------------------------- Lie group


def test_se3_exp_zero():
    h = se3_exp(np.zeros(6))
    np.testing.assert_array_equal(h.matrix(), np.eye(4))


def test_se3_exp_matches_matrix_exponential():
    rng = np.random.default_rng(2)
    for _ in range(50):
        xi = np.concatenate([rng.normal(size=3), rng.normal(size=3)])
        tw = np.zeros((4, 4))
        tw[:3, :3] = hat(xi[3:])
        tw[:3, 3] = xi[:3]
        np.testing.assert_allclose(se3_exp(xi).matrix(), expm(tw), atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(
    rho=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    axis=st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
    angle=st.floats(1e-4, 3.0),
)
def test_se3_log_exp_round_trip(rho, axis, angle):
    w = np.asarray(axis) / np.linalg.norm(axis) * angle
    xi = np.concatenate([rho, w])
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


@pytest.mark.parametrize("angle", [1e-9, 1e-7, 1e-5, 0.5, np.pi - 1e-4, np.pi - 1e-7])
def test_so3_log_branches(angle):
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    w = so3_log(so3_exp(axis * angle))
    np.testing.assert_allclose(w, axis * angle, atol=1e-7)


def test_so3_log_at_pi():
    r = np.diag([1.0, -1.0, -1.0])  # pi about x
    w = so3_log(r)
    assert np.linalg.norm(w) == pytest.approx(np.pi)
    np.testing.assert_allclose(so3_exp(w), r, atol=1e-12)


# ------------------------------------------------------------ quaternions


def test_quaternion_matches_scipy():
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        xyzw = np.r_[q[1:], q[0]]
        np.testing.assert_allclose(quat_to_rotation(q), Rotation.from_quat(xyzw).as_matrix(), atol=1e-12)
        back = rotation_to_quat(quat_to_rotation(q))
        assert back[0] >= 0
        np.testing.assert_allclose(back, q if q[0] >= 0 else -q, atol=1e-12)


def test_from_quaternion_keeps_source_for_round_trip():
    q = np.array([0.5, 0.5, -0.5, 0.5])
    h = Pose.from_quaternion(q, [1, 2, 3])
    np.testing.assert_array_equal(h.quaternion(), q)


def test_quaternion_rejects_zero():
    with pytest.raises(ValueError):
        quat_to_rotation([0, 0, 0, 0])
