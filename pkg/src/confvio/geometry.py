"""Rotation, pose and three-view geometry primitives.

Conventions
-----------
* Quaternions are Hamilton, scalar-first ``[w, x, y, z]`` and right-handed.
* ``quat_to_dcm(q_ab)`` returns the matrix mapping vectors expressed in frame
  ``b`` into frame ``a``.  For the IMU attitude ``^W_I q`` this maps IMU-frame
  vectors into the world frame.
* Composition follows the matrix product: ``R(q_ab ⊗ q_bc) = R(q_ab) R(q_bc)``.
* Camera frames are x right, y down, z forward.  Projection matrices map
  world points to camera/pixel coordinates.

Most array functions accept leading batch dimensions so the filter can push
all sigma points through in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError, TransferDegenerateError

UNIT_NORM_TOL = 1e-6
DEGENERATE_TENSOR_NORM = 1e-12
TRANSFER_SCALE_EPS = 1e-12


# --------------------------------------------------------------------------
# quaternion arrays


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product ``p ⊗ q`` (broadcasts over leading axes)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation vector ``rotvec`` (axis * angle, rad)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x -> 1/2 for x -> 0; Taylor branch keeps small angles exact
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    k = np.where(small, 2.0, angle / np.where(small, 1.0, s))
    return k * vec


def quat_to_dcm(q) -> np.ndarray:
    """Direction cosine matrix of a unit quaternion.

    Raises InvalidInputError if ``|q|`` deviates from 1 by more than 1e-6.
    """
    q = _as_quat_array(q)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > UNIT_NORM_TOL):
        raise InvalidInputError(f"quaternion not unit norm (|q| = {norm})")
    return _dcm_unchecked(q)


def _dcm_unchecked(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def dcm_to_quat(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_dcm` (Shepperd's method), returns w >= 0."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        return np.stack([dcm_to_quat(m) for m in r.reshape(-1, 3, 3)]).reshape(r.shape[:-2] + (4,))
    tr = np.trace(r)
    diag = np.diag(r)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_integrate(q, omega, dt: float) -> np.ndarray:
    """Propagate attitude by a constant body rate ``omega`` over ``dt``.

    ``q_next = q ⊗ exp(omega * dt)``, which is the exact solution of
    ``q_dot = 0.5 q ⊗ [0, omega]`` for constant omega.
    """
    if np.any(np.asarray(dt) < 0.0):
        raise InvalidInputError("dt must be non-negative")
    q = _as_quat_array(q)
    dq = quat_exp(np.asarray(omega, dtype=float) * dt)
    return quat_normalize(quat_multiply(q, dq))


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return quat_exp(axis / np.linalg.norm(axis) * angle)


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """ZYX convention: ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    qy = quat_from_axis_angle([0, 1, 0], pitch)
    qx = quat_from_axis_angle([1, 0, 0], roll)
    return quat_normalize(quat_multiply(quat_multiply(qz, qy), qx))


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (rad) of a rotation matrix.

    Uses ``atan2(sin, cos)`` so tiny angles are not swamped by rounding.
    """
    c = 0.5 * (np.trace(r) - 1.0)
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(s, c))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _as_quat_array(q) -> np.ndarray:
    if isinstance(q, Quaternion):
        return q.as_array()
    return np.asarray(q, dtype=float)


# --------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion ``w + xi + yj + zk``."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls()

    @classmethod
    def from_array(cls, arr) -> "Quaternion":
        w, x, y, z = (float(a) for a in np.asarray(arr, dtype=float).reshape(4))
        return cls(w, x, y, z)

    @classmethod
    def from_dcm(cls, r) -> "Quaternion":
        return cls.from_array(dcm_to_quat(r))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        return Quaternion.from_array(quat_normalize(self.as_array()))

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def to_dcm(self) -> np.ndarray:
        return quat_to_dcm(self.as_array())

    def rotate(self, v) -> np.ndarray:
        return self.to_dcm() @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform ``parent_from_child``.

    ``rotation`` maps child-frame vectors into the parent frame and
    ``translation`` is the child origin expressed in the parent frame, so
    ``x_parent = R x_child + t``.
    """

    rotation: Quaternion = field(default_factory=Quaternion)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    parent: str = "world"
    child: str = "imu"

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, parent: str = "world", child: str = "imu") -> "RigidPose":
        return cls(Quaternion(), np.zeros(3), parent, child)

    @classmethod
    def from_matrix(cls, m: np.ndarray, parent: str = "world", child: str = "imu") -> "RigidPose":
        m = np.asarray(m, dtype=float)
        return cls(Quaternion.from_dcm(m[:3, :3]), m[:3, 3], parent, child)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.to_dcm()

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidPose":
        r_inv = self.rotation.conjugate()
        t_inv = -(r_inv.to_dcm() @ self.translation)
        return RigidPose(r_inv, t_inv, self.child, self.parent)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: (a_from_b) ∘ (b_from_c) -> a_from_c."""
        if self.child != other.parent:
            raise InvalidInputError(f"frame mismatch: {self.parent}<-{self.child} ∘ {other.parent}<-{other.child}")
        q = (self.rotation * other.rotation).normalized()
        t = self.R @ other.translation + self.translation
        return RigidPose(q, t, self.parent, other.child)

    __matmul__ = compose

    def transform(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels, with optional image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 1242
    height: int = 375

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")

    @classmethod
    def kitti_like(cls) -> "CameraIntrinsics":
        return cls(721.5, 721.5, 609.6, 172.9, 1242, 375)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def bearing(self, uv) -> np.ndarray:
        """Unit viewing rays for pixels ``(..., 2)``."""
        uv = np.asarray(uv, dtype=float)
        rays = np.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, np.ones(uv.shape[:-1])],
            axis=-1,
        )
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


@dataclass(frozen=True)
class ImageLine:
    """Homogeneous image line ``a u + b v + c = 0``."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a == 0.0 and self.b == 0.0:
            raise InvalidInputError("line normal (a, b) must be nonzero")

    @classmethod
    def from_array(cls, arr) -> "ImageLine":
        a, b, c = (float(v) for v in np.asarray(arr, dtype=float).reshape(3))
        return cls(a, b, c)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def residual(self, uv) -> float:
        u, v = uv
        return self.a * u + self.b * v + self.c


@dataclass(frozen=True)
class TrifocalTensor:
    """Three 3x3 slices ``T_j``; ``slices[j]`` is ``T_j``.

    The tensor is expressed in calibrated coordinates of a frame where the
    point-input view (view 3) is canonical ``[I | 0]``.
    """

    slices: np.ndarray

    def __post_init__(self):
        s = np.array(self.slices, dtype=float).reshape(3, 3, 3)
        s.setflags(write=False)
        object.__setattr__(self, "slices", s)

    @property
    def frobenius(self) -> float:
        return float(np.linalg.norm(self.slices))

    @property
    def is_degenerate(self) -> bool:
        return self.frobenius < DEGENERATE_TENSOR_NORM


# --------------------------------------------------------------------------
# cameras


def camera_matrix(world_from_camera: RigidPose) -> np.ndarray:
    """Calibrated 3x4 projection ``[R_cw | t_cw]``."""
    r_wc = world_from_camera.R
    c = world_from_camera.translation
    return np.hstack([r_wc.T, (-r_wc.T @ c)[:, None]])


def build_projection(world_from_camera: RigidPose, K: CameraIntrinsics | None = None) -> np.ndarray:
    """Pixel projection matrix ``K [R_cw | t_cw]``; identity K when omitted."""
    P = camera_matrix(world_from_camera)
    return P if K is None else K.K @ P


def project(P: np.ndarray, points) -> tuple[np.ndarray, np.ndarray]:
    """Project world points through ``P``.

    Returns ``(pixels, depth)``; entries with ``depth <= 0`` lie behind the
    camera and their pixels should not be trusted.
    """
    points = np.asarray(points, dtype=float)
    xh = points @ P[:, :3].T + P[:, 3]
    depth = xh[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = xh[..., :2] / depth[..., None]
    return uv, depth


def canonical_projections(P1, P2, P3) -> tuple[np.ndarray, np.ndarray]:
    """Re-express P1 and P2 in the frame where ``P3 = [I | 0]``.

    Accepts batched ``(..., 3, 4)`` input.  Raises DegenerateGeometryError
    when the left 3x3 block of P3 is singular.
    """
    P1 = np.asarray(P1, dtype=float)
    P2 = np.asarray(P2, dtype=float)
    P3 = np.asarray(P3, dtype=float)
    M = P3[..., :3]
    cond = np.linalg.cond(M)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
        raise DegenerateGeometryError("third projection matrix is rank deficient")
    M_inv = np.linalg.inv(M)
    # H = [[M^-1, -M^-1 p4], [0, 1]] so that P3 H = [I | 0]
    offset = -np.einsum("...ij,...j->...i", M_inv, P3[..., 3])

    def apply(P):
        left = P[..., :3] @ M_inv
        right = np.einsum("...ij,...j->...i", P[..., :3], offset) + P[..., 3]
        return np.concatenate([left, right[..., None]], axis=-1)

    return apply(P1), apply(P2)


def trifocal_slices(P1c: np.ndarray, P2c: np.ndarray) -> np.ndarray:
    """Tensor slices from canonical projections (batched).

    ``T_j = P2[:, j] P1[:, 3]^T - P2[:, 3] P1[:, j]^T`` where P1 is the
    output view, P2 the line view, and view 3 is ``[I | 0]``.  Returns an
    array shaped ``(..., 3, 3, 3)`` indexed ``[j, row, col]``.
    """
    P1c = np.asarray(P1c, dtype=float)
    P2c = np.asarray(P2c, dtype=float)
    a = P2c[..., :3]  # columns a_j
    b = P1c[..., :3]
    a4 = P2c[..., 3]
    b4 = P1c[..., 3]
    first = np.einsum("...rj,...c->...jrc", a, b4)
    second = np.einsum("...r,...cj->...jrc", a4, b)
    return first - second


def trifocal_from_projections(P1, P2, P3) -> TrifocalTensor:
    """Trifocal tensor of views (1: output, 2: line, 3: point input)."""
    P1c, P2c = canonical_projections(P1, P2, P3)
    return TrifocalTensor(trifocal_slices(P1c, P2c))


def transfer_normalized(slices: np.ndarray, f3: np.ndarray, l2: np.ndarray) -> np.ndarray:
    """Contract ``sum_j f3[j] T_j^T l2`` (batched over leading axes).

    ``slices`` may carry sigma-point axes ``(S, 3, 3, 3)`` while ``f3`` and
    ``l2`` carry feature axes ``(M, 3)``; the result is then ``(S, M, 3)``.
    """
    if slices.ndim == 3 and f3.ndim == 1:
        return np.einsum("j,jrc,r->c", f3, slices, l2)
    if slices.ndim == 3:
        return np.einsum("mj,jrc,mr->mc", f3, slices, l2)
    return np.einsum("mj,sjrc,mr->smc", f3, slices, l2)


def transfer_point(T: TrifocalTensor, f3, l2, K: CameraIntrinsics | None = None) -> np.ndarray:
    """Predict the view-1 pixel from a view-3 point and a view-2 line.

    ``f3`` is a homogeneous (or 2-vector) pixel in view 3, ``l2`` an
    :class:`ImageLine` (or 3-array) in view-2 pixels.  With ``K`` omitted the
    inputs are taken as calibrated coordinates.
    """
    if T.is_degenerate:
        raise DegenerateGeometryError("trifocal tensor is degenerate (zero baseline)")
    f3 = np.asarray(f3, dtype=float)
    if f3.shape == (2,):
        f3 = np.append(f3, 1.0)
    l2 = l2.as_array() if isinstance(l2, ImageLine) else np.asarray(l2, dtype=float)
    if K is not None:
        f3 = K.K_inv @ f3
        l2 = K.K.T @ l2
    f3 = f3 / np.linalg.norm(f3)
    l2 = l2 / np.linalg.norm(l2)
    x1 = transfer_normalized(T.slices / T.frobenius, f3, l2)
    if abs(x1[2]) < TRANSFER_SCALE_EPS:
        raise TransferDegenerateError("transferred point is at infinity; l2 is (near) epipolar")
    if K is not None:
        x1 = K.K @ x1
    return x1[:2] / x1[2]


def choose_line(f2, epipolar_direction) -> ImageLine:
    """Line through ``f2`` perpendicular to the local epipolar direction.

    Falls back to the vertical line through ``f2`` when the direction is
    numerically zero.
    """
    f2 = np.asarray(f2, dtype=float)[:2]
    d = np.asarray(epipolar_direction, dtype=float)[:2]
    n = np.linalg.norm(d)
    if n < 1e-12:
        d = np.array([1.0, 0.0])
    else:
        d = d / n
    return ImageLine(d[0], d[1], -float(d @ f2))


def choose_lines(f2: np.ndarray, epipolar_directions: np.ndarray) -> np.ndarray:
    """Vectorized :func:`choose_line`; returns ``(M, 3)`` line coefficients."""
    d = np.asarray(epipolar_directions, dtype=float)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    bad = n[..., 0] < 1e-12
    d = np.where(bad[..., None], np.array([1.0, 0.0]), d / np.where(n == 0, 1.0, n))
    c = -np.einsum("mi,mi->m", d, f2)
    return np.column_stack([d, c])


def fundamental_from_canonical(P2c: np.ndarray) -> np.ndarray:
    """Calibrated fundamental (essential) matrix mapping view-3 points to view-2 lines."""
    a4 = P2c[..., 3]
    A = P2c[..., :3]
    if np.ndim(a4) == 1:
        return skew(a4) @ A
    sk = np.zeros(a4.shape[:-1] + (3, 3))
    sk[..., 0, 1], sk[..., 0, 2] = -a4[..., 2], a4[..., 1]
    sk[..., 1, 0], sk[..., 1, 2] = a4[..., 2], -a4[..., 0]
    sk[..., 2, 0], sk[..., 2, 1] = -a4[..., 1], a4[..., 0]
    return sk @ A
