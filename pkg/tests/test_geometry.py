import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coral import DataError
from coral.geometry import (CameraModel, GridSpec, Pose, format_pose, project_points, project_to_pixel,
                            read_poses, transform_point, write_poses)
from oracles import floor_cell, homogeneous_apply


def random_pose(rng, source="lidar", target="world"):
    q = rng.normal(size=4)
    return Pose.from_quaternion(q, rng.uniform(-50, 50, 3), source, target)


def test_transform_identity_and_translation():
    p = (3.2, 4.7, 1.5)
    assert np.allclose(transform_point(Pose.identity(), p), p, atol=0)
    assert np.allclose(transform_point(Pose(np.eye(3), (0, 0, 2)), p), (3.2, 4.7, 3.5), atol=1e-15)


def test_transform_matches_homogeneous_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        pose = random_pose(rng)
        p = rng.uniform(-100, 100, 3)
        want = homogeneous_apply(pose.rotation.tolist(), pose.translation.tolist(), p.tolist())
        assert np.allclose(transform_point(pose, p), want, rtol=0, atol=1e-9)


def test_inverse_round_trip_and_composition():
    rng = np.random.default_rng(2)
    for _ in range(100):
        pose = random_pose(rng)
        p = rng.uniform(-100, 100, 3)
        assert np.allclose(transform_point(pose.inverse(), transform_point(pose, p)), p, atol=1e-9)
        ident = pose.inverse() @ pose
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(ident.translation, 0, atol=1e-9)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.001, np.zeros(3))


def test_composition_checks_frames():
    a = Pose.identity("lidar", "world")
    b = Pose.identity("camera", "body")
    with pytest.raises(ValueError, match="frame mismatch"):
        a @ b


def test_quaternion_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pose = random_pose(rng)
        again = Pose.from_quaternion(pose.quaternion(), pose.translation)
        assert np.allclose(again.rotation, pose.rotation, atol=1e-12)


def test_project_examples():
    cam = CameraModel(100, 100, 56, 56, 112, 112)
    assert project_to_pixel(cam, (0, 0, 1)) == (56, 56)
    assert project_to_pixel(cam, (0.5, 0, 1)) == (106, 56)
    assert project_to_pixel(cam, (0, 0, -1)) is None
    assert project_to_pixel(cam, (0, 0, 1e-6)) is None


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0, 100, 56, 56, 112, 112)
    with pytest.raises(ValueError):
        CameraModel(100, 100, 112, 56, 112, 112)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 50), st.floats(0.1, 10))
def test_projection_scale_invariant(x, y, z, s):
    cam = CameraModel(80, 90, 40, 30, 96, 64)
    u1, v1 = project_to_pixel(cam, (x, y, z))
    u2, v2 = project_to_pixel(cam, (s * x, s * y, s * z))
    assert abs(u1 - u2) <= 1e-9 * max(1, abs(u1)) and abs(v1 - v2) <= 1e-9 * max(1, abs(v1))


def test_project_points_matches_scalar():
    rng = np.random.default_rng(4)
    cam = CameraModel(80, 90, 40, 30, 96, 64)
    pts = rng.uniform(-3, 3, (500, 3))
    u, v, front = project_points(cam, pts)
    for k, p in enumerate(pts):
        ref = project_to_pixel(cam, p)
        assert (ref is not None) == front[k]
        if ref is not None:
            assert math.isclose(u[k], ref[0], abs_tol=1e-12) and math.isclose(v[k], ref[1], abs_tol=1e-12)


def test_world_to_cell_examples():
    spec = GridSpec(80, 80, 0.5, (-20, -20))
    assert spec.world_to_cell((0, 0, 7)) == (40, 40)
    assert spec.world_to_cell((-20, -20, 0)) == (0, 0)
    assert spec.world_to_cell((20, 0, 0)) is None
    assert spec.world_to_cell((-20.0001, 0, 0)) is None


def test_world_to_cell_oracle_and_recentering():
    rng = np.random.default_rng(5)
    spec = GridSpec(37, 23, 0.37, (-3.1, 4.2))
    pts = rng.uniform(-8, 14, (1000, 3))
    i, j, inside = spec.cells_of(pts)
    for k, p in enumerate(pts):
        ci, cj = floor_cell(p[0], p[1], -3.1, 4.2, 0.37)
        ok = 0 <= ci < 37 and 0 <= cj < 23
        assert spec.world_to_cell(p) == ((ci, cj) if ok else None)
        assert inside[k] == ok and (not ok or (i[k], j[k]) == (ci, cj))
        if ok:
            cx, cy = spec.cell_center(ci, cj)
            assert abs(cx - p[0]) <= 0.185 + 1e-12 and abs(cy - p[1]) <= 0.185 + 1e-12


def test_centered_grid_puts_point_in_middle():
    spec = GridSpec.centered(10.0, -4.0, 48, 0.5)
    assert spec.world_to_cell((10.0, -4.0, 0)) == (24, 24)


def test_pose_file_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    poses = [(float(k), random_pose(rng)) for k in range(5)]
    path = tmp_path / "poses.txt"
    write_poses(path, poses)
    back = read_poses(path)
    assert [ts for ts, _ in back] == [ts for ts, _ in poses]
    for (_, a), (_, b) in zip(poses, back):
        assert np.allclose(a.rotation, b.rotation, atol=1e-12) and np.allclose(a.translation, b.translation)
    assert len(format_pose(0.0, poses[0][1]).split()) == 8


def test_pose_file_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 2 3 0 0 0\n")
    with pytest.raises(DataError, match="expected 8 fields"):
        read_poses(path)
    path.write_text("0 1 2 3 0 0 x 1\n")
    with pytest.raises(DataError, match="non-numeric"):
        read_poses(path)
