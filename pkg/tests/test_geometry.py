import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import pinhole, random_pose
from sparsesplat.geometry import (Camera, GeometryError, Intrinsics, RigidPose, backproject, load_cameras, project,
                                  quat_to_rotmat, reproject_pixel, rotmat_to_quat, save_cameras, so3_exp, so3_log)


def test_project_on_axis():
    pix, z = project(pinhole(), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(pix, [50.0, 50.0], atol=1e-6)
    assert abs(z - 1.0) < 1e-6


def test_project_behind_camera_is_absent():
    assert project(pinhole(), [0.0, 0.0, -1.0]) is None


def test_project_hand_evaluated():
    # u = 100 * 0.1 / 2 + 50, v = 100 * 0.2 / 2 + 50
    pix, z = project(pinhole(), [0.1, 0.2, 2.0])
    np.testing.assert_allclose(pix, [55.0, 60.0], atol=1e-6)
    assert abs(z - 2.0) < 1e-6


def test_project_respects_near_plane():
    assert project(pinhole(), [0.0, 0.0, 1e-4]) is None
    assert project(pinhole(), [0.0, 0.0, 2e-4]) is not None


def test_backproject_on_axis():
    np.testing.assert_allclose(backproject(pinhole(), [50.0, 50.0], 3.0), [0.0, 0.0, 3.0], atol=1e-6)


def test_backproject_translated_camera():
    # x_cam = x_world + (1, 0, 0), so the axis point at depth 1 sits at world (-1, 0, 1)
    cam = pinhole(pose=RigidPose(translation=[1.0, 0.0, 0.0]))
    np.testing.assert_allclose(backproject(cam, [50.0, 50.0], 1.0), [-1.0, 0.0, 1.0], atol=1e-6)


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(GeometryError):
        backproject(pinhole(), [10.0, 10.0], 0.0)
    with pytest.raises(GeometryError):
        reproject_pixel(pinhole(), pinhole(), [10.0, 10.0], -1.0)


def test_round_trip_1000_random(rng):
    cam = pinhole(pose=random_pose(rng))
    worst = 0.0
    for _ in range(1000):
        p = rng.uniform([0, 0], [100, 100])
        d = rng.uniform(0.1, 50.0)
        q, z = project(cam, backproject(cam, p, d))
        worst = max(worst, np.max(np.abs(q - p) / np.maximum(np.abs(p), 1.0)), abs(z - d) / d)
    assert worst < 1e-6


def test_self_reprojection_identity(rng):
    cam = pinhole(pose=random_pose(rng))
    q, z = reproject_pixel(cam, cam, [12.5, 77.25], 4.0)
    np.testing.assert_allclose(q, [12.5, 77.25], atol=1e-9)
    assert abs(z - 4.0) < 1e-9


def test_reproject_forward_translation():
    # cam_b sits 1 m further along +z, so x_cam_b = x_world - (0, 0, 1)
    cam_a = pinhole()
    cam_b = pinhole(pose=RigidPose(translation=[0.0, 0.0, -1.0]))
    q, z = reproject_pixel(cam_a, cam_b, [50.0, 50.0], 2.0)
    assert abs(z - 1.0) < 1e-9
    np.testing.assert_allclose(q, [50.0, 50.0], atol=1e-9)


def test_reproject_behind_is_absent():
    cam_b = pinhole(pose=RigidPose(translation=[0.0, 0.0, -5.0]))
    assert reproject_pixel(pinhole(), cam_b, [50.0, 50.0], 2.0) is None


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 10, 10)
    with pytest.raises(GeometryError):
        Intrinsics(1.0, 1.0, 10.0, 1.0, 10, 10)


def test_camera_file_round_trip(tmp_path, rng):
    cams = [pinhole(pose=random_pose(rng), cam_id=i) for i in range(3)]
    save_cameras(cams, tmp_path / "c.json")
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        assert a.id == b.id and a.intrinsics == b.intrinsics
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        np.testing.assert_array_equal(a.pose.translation, b.pose.translation)


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_pose_inverse_is_identity(seed):
    pose = random_pose(np.random.default_rng(seed))
    np.testing.assert_allclose(pose.compose(pose.inverse()).matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(pose.inverse().compose(pose).matrix(), np.eye(4), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_compose_is_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    np.testing.assert_allclose(a.compose(b).compose(c).matrix(), a.compose(b.compose(c)).matrix(), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_quaternion_stays_unit(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    for _ in range(5):
        pose = pose.perturbed(rng.normal(scale=0.3, size=3), rng.normal(size=3))
    assert abs(np.linalg.norm(pose.rotation) - 1.0) < 1e-9


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_so3_exp_log_round_trip(seed):
    rng = np.random.default_rng(seed)
    omega = rng.normal(size=3)
    omega *= rng.uniform(0.0, 3.0) / np.linalg.norm(omega)
    np.testing.assert_allclose(so3_log(so3_exp(omega)), omega, atol=1e-9)
    R = so3_exp(omega)
    np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_project_backproject_round_trip_random_cameras(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(Intrinsics(rng.uniform(20, 500), rng.uniform(20, 500), rng.uniform(0, 63), rng.uniform(0, 47), 64, 48),
                 random_pose(rng))
    point_cam = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.05, 20)])
    world = cam.pose.inverse().apply(point_cam)
    pix, z = project(cam, world)
    back = backproject(cam, pix, z)
    assert np.linalg.norm(back - world) / np.linalg.norm(world) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_self_reprojection_property(seed):
    rng = np.random.default_rng(seed)
    cam = pinhole(pose=random_pose(rng))
    p, d = rng.uniform(0, 100, 2), rng.uniform(0.01, 100)
    q, z = reproject_pixel(cam, cam, p, d)
    np.testing.assert_allclose(q, p, atol=1e-9)
    assert abs(z - d) < 1e-9
