"""Core type invariants: validation, center of mass, velocity, transforms."""
from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from depthgrid.model import (
    CameraIntrinsics,
    ColorFrame,
    DepthFrame,
    InputSkeleton,
    Joint,
    JointKind,
    LabelFrame,
    OutputSkeleton,
    PointCloud,
    RigidTransform,
    TrackState,
    compute_center_of_mass,
    validate,
)


def full_joint_set(position=(0.0, 0.0, 2.0), confidence=0.9):
    return tuple(Joint(kind, position, confidence) for kind in JointKind)


# -- validation ---------------------------------------------------------------


def test_valid_depth_frame_passes():
    frame = DepthFrame(2, 2, np.array([[500, 1200], [3500, 0]], dtype=np.uint16))
    assert validate(frame) == []


def test_depth_frame_out_of_range_flagged():
    frame = DepthFrame(2, 1, np.array([[100, 4000]], dtype=np.uint16))
    problems = validate(frame)
    assert len(problems) == 1
    assert "[500, 3500]" in problems[0]


def test_depth_frame_zero_is_a_hole_not_a_violation():
    frame = DepthFrame(3, 1, np.array([[0, 0, 0]], dtype=np.uint16))
    assert validate(frame) == []


def test_label_frame_rejects_label_16():
    frame = LabelFrame(2, 1, np.array([[0, 16]], dtype=np.uint8))
    assert any("label > 15" in p for p in validate(frame))


def test_label_frame_accepts_full_range():
    frame = LabelFrame(16, 1, np.arange(16, dtype=np.uint8).reshape(1, 16))
    assert validate(frame) == []


def test_color_frame_shape_checked_at_construction():
    with pytest.raises(ValueError):
        ColorFrame(2, 2, np.zeros((2, 2), dtype=np.uint8))
    assert validate(ColorFrame(2, 2, np.zeros((2, 2, 3), dtype=np.uint8))) == []


def test_intrinsics_violations():
    assert validate(CameraIntrinsics()) == []
    bad = CameraIntrinsics(hfov_deg=190.0, min_range_mm=4000, max_range_mm=3500)
    problems = validate(bad)
    assert any("hfov" in p for p in problems)
    assert any("min_range_mm" in p for p in problems)


def test_joint_confidence_bounds():
    assert validate(Joint(JointKind.HEAD, (0, 0, 1), 1.0)) == []
    assert validate(Joint(JointKind.HEAD, (0, 0, 1), 1.5)) == ["confidence out of [0, 1]"]
    assert validate(Joint(JointKind.HEAD, (0, float("nan"), 1), 0.5)) == [
        "position not finite"
    ]


def test_input_skeleton_requires_one_joint_per_kind():
    joints = full_joint_set()
    assert validate(InputSkeleton(1, 1, joints)) == []
    dupes = joints[:14] + (joints[0],)
    assert any("duplicate joint kinds" in p for p in validate(InputSkeleton(1, 1, dupes)))
    assert any("local_user_id" in p for p in validate(InputSkeleton(1, 0, joints)))


def test_output_skeleton_contributor_invariant():
    out = OutputSkeleton(output_id=1, state=TrackState.CONFIRMED)
    assert any("contributors empty" in p for p in validate(out))
    out.state = TrackState.LOST
    assert validate(out) == []


def test_rigid_transform_scaled_rotation_flagged():
    tf = RigidTransform(2.0 * np.eye(3), np.zeros(3))
    problems = validate(tf)
    assert "not orthonormal" in problems
    assert "determinant not +1" in problems


def test_rigid_transform_reflection_flagged():
    tf = RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    assert validate(tf) == ["determinant not +1"]


def test_validate_unknown_type():
    assert validate(object()) == ["unsupported type object"]


# -- center of mass -----------------------------------------------------------


def test_com_weights_by_confidence_above_floor():
    joints = [
        Joint(JointKind.HEAD, (0.0, 0.0, 0.0), 0.9),
        Joint(JointKind.NECK, (1.0, 0.0, 0.0), 0.3),
        Joint(JointKind.TORSO, (2.0, 0.0, 0.0), 0.6),
    ]
    # 0.3 falls below the floor; weighted mean of the other two:
    expected = (0.9 * 0.0 + 0.6 * 2.0) / 1.5
    com = compute_center_of_mass(joints)
    assert com == pytest.approx((expected, 0.0, 0.0))


def test_com_falls_back_to_plain_mean_when_all_low():
    joints = [
        Joint(JointKind.HEAD, (0.0, 0.0, 0.0), 0.1),
        Joint(JointKind.NECK, (1.0, 2.0, 3.0), 0.4),
    ]
    assert compute_center_of_mass(joints) == pytest.approx((0.5, 1.0, 1.5))


def test_input_skeleton_autofills_com():
    skel = InputSkeleton(1, 1, full_joint_set(position=(0.5, -0.25, 2.0)))
    assert skel.center_of_mass == pytest.approx((0.5, -0.25, 2.0))


# -- output skeleton history and velocity --------------------------------------


def test_velocity_from_three_entry_history():
    out = OutputSkeleton(output_id=1)
    out.com_history.extend([(0, (0.0, 0.0, 0.0)), (5, (1.0, 0.0, 0.5)), (10, (2.0, 0.0, 1.0))])
    # (newest - oldest) / frame span = (2, 0, 1) / 10
    assert out.velocity == pytest.approx([0.2, 0.0, 0.1])


def test_velocity_zero_without_history():
    out = OutputSkeleton(output_id=1)
    assert out.velocity == pytest.approx([0.0, 0.0, 0.0])
    out.com_history.append((3, (1.0, 1.0, 1.0)))
    assert out.velocity == pytest.approx([0.0, 0.0, 0.0])


def test_com_history_evicts_oldest_at_capacity():
    out = OutputSkeleton(output_id=1)
    assert out.com_history.maxlen == 30
    for i in range(35):
        out.com_history.append((i, (float(i), 0.0, 0.0)))
    assert len(out.com_history) == 30
    assert out.com_history[0][0] == 5
    assert out.center_of_mass == pytest.approx((34.0, 0.0, 0.0))


@given(
    st.lists(
        st.tuples(
            st.floats(-10, 10, allow_nan=False),
            st.floats(-10, 10, allow_nan=False),
            st.floats(-10, 10, allow_nan=False),
        ),
        min_size=2,
        max_size=8,
    )
)
def test_velocity_matches_endpoint_formula(coms):
    out = OutputSkeleton(output_id=1, com_history=deque(maxlen=30))
    for i, com in enumerate(coms):
        out.com_history.append((2 * i, com))
    span = 2 * (len(coms) - 1)
    expected = (np.array(coms[-1]) - np.array(coms[0])) / span
    assert np.allclose(out.velocity, expected)


# -- rigid transform algebra ---------------------------------------------------


def test_rigid_apply_matches_matrix_form():
    angle = np.radians(30.0)
    rot = np.array(
        [
            [np.cos(angle), -np.sin(angle), 0.0],
            [np.sin(angle), np.cos(angle), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    tf = RigidTransform(rot, np.array([1.0, -2.0, 0.5]))
    pts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0]])
    expected = (rot @ pts.T).T + tf.translation
    assert np.allclose(tf.apply(pts), expected)


def test_rigid_compose_and_inverse():
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    a = RigidTransform(rot, np.array([1.0, 2.0, 3.0]))
    b = RigidTransform(rot.T, np.array([-0.5, 0.0, 4.0]))
    pts = np.array([[0.25, -1.0, 2.0]])
    assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)))
    assert a.compose(a.inverse()).almost_equal(RigidTransform.identity())
    assert a.inverse().compose(a).almost_equal(RigidTransform.identity())


def test_intrinsics_pinhole_constants():
    intr = CameraIntrinsics(width=640, height=480, hfov_deg=57.5, vfov_deg=45.0)
    assert intr.fx == pytest.approx(320.0 / np.tan(np.radians(57.5) / 2))
    assert intr.fy == pytest.approx(240.0 / np.tan(np.radians(45.0) / 2))
    assert (intr.cx, intr.cy) == (319.5, 239.5)


# -- point cloud ---------------------------------------------------------------


def test_point_cloud_shapes_and_immutability():
    cloud = PointCloud(np.zeros((4, 3)))
    assert len(cloud) == 4
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0
    assert len(PointCloud(np.empty(0))) == 0
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))


def test_point_cloud_finite_check():
    cloud = PointCloud(np.array([[0.0, 0.0, np.inf]]))
    assert validate(cloud) == ["non-finite coordinates"]


def test_frames_are_immutable():
    frame = DepthFrame(2, 2, np.zeros((2, 2), dtype=np.uint16))
    with pytest.raises(ValueError):
        frame.data[0, 0] = 7
