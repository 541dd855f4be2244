import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierloc.errors import ValidationError
from hierloc.geometry import (
    PinholeCamera,
    Pose,
    axis_angle_quat,
    bearing,
    matrix_to_quat,
    pose_error,
    project,
    project_points,
    quat_to_matrix,
    rotation_angle_deg,
)

from conftest import random_pose

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def test_project_principal_ray():
    cam = PinholeCamera(1, 1, 0, 0, 10, 10)
    assert np.allclose(project(cam, Pose.identity(), [0, 0, 5]), [0, 0])


def test_project_similar_triangles():
    cam = PinholeCamera(100, 100, 0, 0, 640, 480)
    assert np.allclose(project(cam, Pose.identity(), [1, 0, 5]), [20, 0])


def test_project_behind_camera_is_flagged():
    cam = PinholeCamera(100, 100, 50, 50, 100, 100)
    assert project(cam, Pose.identity(), [0, 0, -1]) is None
    assert project(cam, Pose.identity(), [0, 0, 1e-10]) is None
    uv, front = project_points(cam, Pose.identity(), np.array([[0, 0, 2.0], [0, 0, -2.0]]))
    assert front.tolist() == [True, False]
    assert np.isnan(uv[1]).all()


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_project_camera_frame_construction(seed):
    rng = np.random.default_rng(seed)
    cam = PinholeCamera(*rng.uniform(100, 800, 2), 320, 240, 640, 480)
    pose = random_pose(rng)
    a, b, c = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 10)
    world = pose.inverse().transform(np.array([a, b, c]))
    expected = [cam.fx * a / c + cam.cx, cam.fy * b / c + cam.cy]
    assert np.allclose(project(cam, pose, world), expected, atol=1e-9)


def test_bearing_examples():
    cam = PinholeCamera(400, 410, 300, 200, 640, 480)
    assert np.allclose(bearing(cam, [300, 200]), [0, 0, 1])
    unit = PinholeCamera(1, 1, 0, 0, 10, 10)
    assert np.allclose(bearing(unit, [1, 0]), [1 / np.sqrt(2), 0, 1 / np.sqrt(2)])


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_bearing_projection_roundtrip(seed):
    rng = np.random.default_rng(seed)
    cam = PinholeCamera(500, 480, 320, 240, 640, 480)
    p = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.1, 20)])
    b = bearing(cam, project(cam, Pose.identity(), p))
    cosang = np.clip(b @ (p / np.linalg.norm(p)), -1, 1)
    assert np.arccos(cosang) < 1e-9 or np.linalg.norm(np.cross(b, p / np.linalg.norm(p))) < 1e-9


def test_quaternion_validation():
    with pytest.raises(ValidationError):
        Pose([1.1, 0, 0, 0], [0, 0, 0])
    p = Pose([1.0005, 0, 0, 0], [0, 0, 0])  # within load tolerance, normalized
    assert abs(np.linalg.norm(p.q) - 1) < 1e-12
    with pytest.raises(ValidationError):
        Pose([1, 0, 0], [0, 0, 0])
    with pytest.raises(ValidationError):
        Pose([np.nan, 0, 0, 0], [0, 0, 0])


def test_camera_validation():
    with pytest.raises(ValidationError):
        PinholeCamera(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValidationError):
        PinholeCamera(1, 1, 11, 0, 10, 10)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_compose_inverse_is_identity(seed):
    rng = np.random.default_rng(seed)
    p = random_pose(rng)
    ident = p.compose(p.inverse())
    # q and -q are the same rotation; compare up to sign
    arr = ident.as_array()
    arr[:4] *= np.sign(arr[0])
    assert np.allclose(arr, [1, 0, 0, 0, 0, 0, 0], atol=1e-9)
    assert abs(np.linalg.norm(p.q) - 1) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_compose_associative_and_matches_matrices(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    assert np.allclose(left.R, right.R, atol=1e-9) and np.allclose(left.t, right.t, atol=1e-9)
    x = rng.normal(size=3)
    assert np.allclose(a.compose(b).transform(x), a.transform(b.transform(x)), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_quaternion_matrix_roundtrip(seed):
    rng = np.random.default_rng(seed)
    R = random_pose(rng).R
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_pose_error_examples():
    rng = np.random.default_rng(3)
    a = random_pose(rng)
    assert pose_error(a, a) == pytest.approx((0.0, 0.0), abs=1e-9)
    # move the camera center by 0.1 m along a random direction
    d = rng.normal(size=3)
    d *= 0.1 / np.linalg.norm(d)
    b = Pose(a.q, a.t - a.R @ d)
    dist, ang = pose_error(a, b)
    assert dist == pytest.approx(0.1, abs=1e-12) and ang == pytest.approx(0.0, abs=1e-9)
    # 90 degrees about the camera y axis, applied on the camera side
    rot = Pose(axis_angle_quat([0, 1, 0], np.pi / 2), np.zeros(3))
    c = rot.compose(a)
    dist, ang = pose_error(a, c)
    assert ang == pytest.approx(90.0, abs=1e-9)
    # oracle: trace formula on the relative rotation, and centers from -R^T t
    R_rel = a.R @ c.R.T
    assert ang == pytest.approx(np.degrees(np.arccos((np.trace(R_rel) - 1) / 2)), abs=1e-6)
    assert dist == pytest.approx(np.linalg.norm(-a.R.T @ a.t + c.R.T @ c.t), abs=1e-12)


def test_pose_error_double_cover():
    rng = np.random.default_rng(4)
    a = random_pose(rng)
    b = Pose(-a.q, a.t)
    assert pose_error(a, b) == pytest.approx((0.0, 0.0), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_pose_error_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    e1, e2 = pose_error(a, b), pose_error(b, a)
    assert abs(e1[0] - e2[0]) < 1e-12 and abs(e1[1] - e2[1]) < 1e-12
    assert 0 <= e1[1] <= 180
    assert e1[1] == pytest.approx(rotation_angle_deg(a.R @ b.R.T), abs=1e-7)
