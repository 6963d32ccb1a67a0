import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confvio.errors import DegenerateGeometryError, InvalidInputError, TransferDegenerateError
from confvio.geometry import (
    CameraIntrinsics,
    ImageLine,
    Quaternion,
    RigidPose,
    TrifocalTensor,
    build_projection,
    choose_line,
    dcm_to_quat,
    project,
    quat_exp,
    quat_from_axis_angle,
    quat_integrate,
    quat_log,
    quat_multiply,
    quat_normalize,
    quat_to_dcm,
    transfer_point,
    trifocal_from_projections,
)

from conftest import perpendicular_line, random_rig, rig_tensor, rodrigues

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
unit_quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1).map(quat_normalize)


# --------------------------------------------------------------------------
# quaternions


def test_identity_quaternion_is_identity_matrix():
    np.testing.assert_array_equal(quat_to_dcm(Quaternion.identity()), np.eye(3))


def test_yaw_90_sends_x_to_y():
    q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    np.testing.assert_allclose(quat_to_dcm(q) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_random_dcms_are_orthonormal(rng):
    q = quat_normalize(rng.normal(size=(1000, 4)))
    R = quat_to_dcm(q)
    err = np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max()
    assert err < 1e-12
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_non_unit_quaternion_rejected():
    with pytest.raises(InvalidInputError):
        quat_to_dcm([1.0, 0.1, 0.0, 0.0])


@given(unit_quats, unit_quats)
def test_composition_matches_matrix_product(p, q):
    np.testing.assert_allclose(quat_to_dcm(quat_multiply(p, q)), quat_to_dcm(p) @ quat_to_dcm(q), atol=1e-12)


@given(unit_quats)
def test_dcm_to_quat_roundtrip(q):
    back = dcm_to_quat(quat_to_dcm(q))
    # q and -q describe the same rotation
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9


@given(arrays(np.float64, 3, elements=st.floats(-1.8, 1.8)).filter(lambda v: np.linalg.norm(v) < np.pi - 1e-3))
def test_exp_log_roundtrip(rv):
    # the log is unique only for angles below pi
    np.testing.assert_allclose(quat_log(quat_exp(rv)), rv, atol=1e-9)


def test_integrate_zero_rate_keeps_quaternion(rng):
    q = quat_normalize(rng.normal(size=4))
    np.testing.assert_allclose(quat_integrate(q, np.zeros(3), 0.5), q, atol=1e-15)


def test_integrate_half_turn_yaw():
    q = quat_integrate([1, 0, 0, 0], [0, 0, np.pi], 1.0)
    np.testing.assert_allclose(quat_to_dcm(q), np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_integrate_matches_rodrigues(seed):
    rng = np.random.default_rng(seed)
    q = quat_normalize(rng.normal(size=4))
    omega = rng.normal(scale=2.0, size=3)
    dt = 1e-3
    expected = quat_to_dcm(q) @ rodrigues(omega * dt)
    np.testing.assert_allclose(quat_to_dcm(quat_integrate(q, omega, dt)), expected, atol=1e-8)


def test_integrate_rejects_negative_dt():
    with pytest.raises(InvalidInputError):
        quat_integrate([1, 0, 0, 0], [0, 0, 1], -0.1)


# --------------------------------------------------------------------------
# poses and projection


@given(unit_quats, vec3, vec3)
def test_pose_inverse_and_compose(q, t, x):
    a = RigidPose(Quaternion.from_array(q), t, "world", "imu")
    ident = a.compose(a.inverse())
    np.testing.assert_allclose(ident.as_matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(a.inverse().transform(a.transform(x)), x, atol=1e-9)


def test_compose_frame_mismatch():
    a = RigidPose.identity("world", "imu")
    with pytest.raises(InvalidInputError):
        a.compose(RigidPose.identity("camera", "x"))


def test_optical_axis_point_projects_to_principal_point(kitti_intrinsics):
    P = build_projection(RigidPose.identity("world", "camera"), kitti_intrinsics)
    uv, depth = project(P, [0.0, 0.0, 5.0])
    np.testing.assert_allclose(uv, [kitti_intrinsics.cx, kitti_intrinsics.cy])
    assert depth == 5.0


def test_translated_camera_shifts_pixel_left(kitti_intrinsics):
    P = build_projection(RigidPose(Quaternion(), [1.0, 0.0, 0.0], "world", "camera"), kitti_intrinsics)
    uv, _ = project(P, [0.0, 0.0, 5.0])
    np.testing.assert_allclose(uv, [kitti_intrinsics.cx - kitti_intrinsics.fx / 5.0, kitti_intrinsics.cy])


def test_point_behind_camera_has_negative_depth(kitti_intrinsics):
    P = build_projection(RigidPose.identity("world", "camera"), kitti_intrinsics)
    _, depth = project(P, [0.0, 0.0, -3.0])
    assert depth < 0


def test_projection_matches_pinhole_oracle(rng):
    rig = random_rig(rng)
    pose = RigidPose(Quaternion.from_dcm(rig.R[0]), rig.c[0], "world", "camera")
    uv, depth = project(build_projection(pose, rig.K), rig.X)
    np.testing.assert_allclose(uv, rig.uv[0], atol=1e-9)
    assert np.all(depth > 0)


def test_bearing_is_unit_and_points_through_pixel(kitti_intrinsics):
    b = kitti_intrinsics.bearing(np.array([[kitti_intrinsics.cx, kitti_intrinsics.cy], [0.0, 0.0]]))
    np.testing.assert_allclose(np.linalg.norm(b, axis=1), 1.0)
    np.testing.assert_allclose(b[0], [0, 0, 1])


# --------------------------------------------------------------------------
# trifocal tensor


def test_slices_match_hand_expansion():
    # views 3 canonical, P1 = [I | t1], P2 = [I | t2]
    t1 = np.array([0.0, 0.0, 1.0])
    t2 = np.array([1.0, 0.0, 0.0])
    P1 = np.hstack([np.eye(3), t1[:, None]])
    P2 = np.hstack([np.eye(3), t2[:, None]])
    P3 = np.hstack([np.eye(3), np.zeros((3, 1))])
    T = trifocal_from_projections(P1, P2, P3).slices
    # T_j = e_j t1^T - t2 e_j^T, written out entry by entry
    expected = np.zeros((3, 3, 3))
    expected[0][0, 2] = 1.0  # e_0 t1^T
    expected[0][0, 0] -= 1.0  # t2 e_0^T
    expected[1][1, 2] = 1.0
    expected[1][0, 1] = -1.0
    expected[2][2, 2] = 1.0
    expected[2][0, 2] = -1.0
    np.testing.assert_array_equal(T, expected)


def test_zero_baseline_tensor_is_zero_and_rejected():
    P = np.hstack([np.eye(3), np.zeros((3, 1))])
    T = trifocal_from_projections(P, P, P)
    assert T.frobenius == 0.0 and T.is_degenerate
    with pytest.raises(DegenerateGeometryError):
        transfer_point(T, [0.1, 0.2, 1.0], [1.0, 0.0, -0.1])


def test_rank_deficient_third_view_rejected():
    P = np.hstack([np.eye(3), np.zeros((3, 1))])
    with pytest.raises(DegenerateGeometryError):
        trifocal_from_projections(P, P, np.zeros((3, 4)))


@pytest.mark.parametrize("seed", range(10))
def test_transfer_reproduces_true_pixel(seed):
    rig = random_rig(np.random.default_rng(seed))
    T = rig_tensor(rig)
    for k in range(len(rig.X)):
        l2 = perpendicular_line(rig.K, rig.R[1], rig.c[1], rig.c[2], rig.uv[1][k])
        uv1 = transfer_point(T, rig.uv[2][k], ImageLine.from_array(l2), rig.K)
        assert np.abs(uv1 - rig.uv[0][k]).max() < 1e-9


def test_transfer_projective_invariance(rng):
    rig = random_rig(rng)
    T = rig_tensor(rig)
    l2 = perpendicular_line(rig.K, rig.R[1], rig.c[1], rig.c[2], rig.uv[1][0])
    f3 = np.append(rig.uv[2][0], 1.0)
    a = transfer_point(T, f3, l2, rig.K)
    b = transfer_point(T, 7.0 * f3, l2, rig.K)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_epipolar_line_is_transfer_degenerate(rng):
    rig = random_rig(rng)
    T = rig_tensor(rig)
    # epipolar line in view 2: through the epipole and the true view-2 point
    e2 = rig.K.K @ rig.R[1].T @ (rig.c[2] - rig.c[1])
    x2 = np.append(rig.uv[1][0], 1.0)
    l_epi = np.cross(e2, x2)
    with pytest.raises(TransferDegenerateError):
        transfer_point(T, rig.uv[2][0], l_epi, rig.K)


def test_tensor_slices_are_read_only():
    T = TrifocalTensor(np.ones((3, 3, 3)))
    with pytest.raises(ValueError):
        T.slices[0, 0, 0] = 2.0


# --------------------------------------------------------------------------
# line selection


def test_choose_line_vertical():
    line = choose_line([100.0, 50.0], [1.0, 0.0])
    assert line.b == 0.0
    assert -line.c / line.a == 100.0


def test_choose_line_horizontal():
    line = choose_line([0.0, 0.0], [0.0, 1.0])
    assert line.a == 0.0 and line.c == 0.0 and line.b != 0.0


@given(arrays(np.float64, 2, elements=st.floats(-2000, 2000)), arrays(np.float64, 2, elements=st.floats(-1, 1)))
def test_choose_line_passes_through_point(f2, d):
    line = choose_line(f2, d)
    assert abs(line.residual(f2)) < 1e-9 * (1 + np.abs(f2).sum())


def test_zero_normal_line_rejected():
    with pytest.raises(InvalidInputError):
        ImageLine(0.0, 0.0, 1.0)


def test_intrinsics_reject_nonpositive_focal():
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
