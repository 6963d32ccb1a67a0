"""Sliding-window trifocal VIO.

State (30 values, in this order)::

    p1 (3) v (3) q1 (4) b_a (3) b_g (3) p2 (3) q2 (4) p3 (3) q3 (4)

``p_i, q_i`` are world-from-IMU poses of the three most recent camera
frames, index 1 being the newest.  No landmarks are estimated: each feature
seen in all three frames yields a 2D measurement in view 1 predicted by
point-line-point transfer through the trifocal tensor of the window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry as geo
from .confidence import (
    CONFIDENCE_CAP,
    CONFIDENCE_FLOOR,
    INVERSION_CMAX,
    ConfidenceMode,
    build_confidence_matrix,
    confidence_weights,
    infer_confidence,
)
from .errors import ConfigError, InvalidInputError, NumericalFailureError
from .geometry import CameraIntrinsics, Quaternion, RigidPose
from .imu import DEFAULT_GRAVITY, ImuNoiseSpec, ImuStream
from .tracks import FeatureTriple
from .ukf import ConfidenceMatrix, GaussianState, SigmaParams, ukf_predict, ukf_update

log = logging.getLogger(__name__)

P1 = slice(0, 3)
V = slice(3, 6)
Q1 = slice(6, 10)
BA = slice(10, 13)
BG = slice(13, 16)
P2 = slice(16, 19)
Q2 = slice(19, 23)
P3 = slice(23, 26)
Q3 = slice(26, 30)
STATE_DIM = 30
QUAT_BLOCKS = (Q1, Q2, Q3)
POSE_SLICES = ((P1, Q1), (P2, Q2), (P3, Q3))

# KITTI-like mounting: camera z forward = IMU x, camera x right = IMU -y
R_IMU_CAM_KITTI = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def default_extrinsic() -> RigidPose:
    return RigidPose(Quaternion.from_dcm(R_IMU_CAM_KITTI), np.array([0.3, 0.0, 0.65]), "imu", "camera")


@dataclass
class VioState:
    p1: np.ndarray
    v: np.ndarray
    q1: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray
    p2: np.ndarray
    q2: np.ndarray
    p3: np.ndarray
    q3: np.ndarray

    def __post_init__(self):
        for name in ("p1", "v", "b_a", "b_g", "p2", "p3"):
            setattr(self, name, np.array(getattr(self, name), dtype=float).reshape(3))
        for name in ("q1", "q2", "q3"):
            q = getattr(self, name)
            q = q.as_array() if isinstance(q, Quaternion) else np.array(q, dtype=float).reshape(4)
            setattr(self, name, q)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "VioState":
        x = np.asarray(x, dtype=float)
        if x.shape != (STATE_DIM,):
            raise InvalidInputError(f"expected a {STATE_DIM}-vector, got shape {x.shape}")
        return cls(x[P1], x[V], x[Q1], x[BA], x[BG], x[P2], x[Q2], x[P3], x[Q3])

    def to_vector(self) -> np.ndarray:
        x = np.empty(STATE_DIM)
        x[P1], x[V], x[Q1], x[BA], x[BG] = self.p1, self.v, self.q1, self.b_a, self.b_g
        x[P2], x[Q2], x[P3], x[Q3] = self.p2, self.q2, self.p3, self.q3
        return x

    @classmethod
    def at_rest_window(cls, p, q, v, b_a=None, b_g=None) -> "VioState":
        """Window whose three poses all equal ``(p, q)``."""
        q = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=float)
        b_a = np.zeros(3) if b_a is None else b_a
        b_g = np.zeros(3) if b_g is None else b_g
        return cls(p, v, q, b_a, b_g, p, q, p, q)

    def pose(self, i: int = 1) -> RigidPose:
        p, q = {1: (self.p1, self.q1), 2: (self.p2, self.q2), 3: (self.p3, self.q3)}[i]
        return RigidPose(Quaternion.from_array(q).normalized(), p, "world", "imu")


@dataclass
class VioConfig:
    """Estimator settings.  Unset P0/Q values fall back to the documented defaults."""

    extrinsic: RigidPose = field(default_factory=default_extrinsic)  # imu_from_camera
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.kitti_like)
    imu_noise: ImuNoiseSpec = field(default_factory=ImuNoiseSpec.low_cost)
    gravity: np.ndarray = field(default_factory=lambda: DEFAULT_GRAVITY.copy())
    sigma_px: float = 1.0
    ransac_threshold: float = 5.0
    ransac_iterations: int = 64
    ransac_min_inlier_ratio: float = 0.3
    max_features: int = 100
    bucket_grid: tuple[int, int] = (8, 4)
    sigma: SigmaParams = field(default_factory=SigmaParams)
    mode: ConfidenceMode = ConfidenceMode.LITERAL
    confidence_floor: float = CONFIDENCE_FLOOR
    confidence_cap: float = CONFIDENCE_CAP
    confidence_cmax: float = INVERSION_CMAX
    p0_position: float = 1e-2
    p0_velocity: float = 1e-1
    p0_orientation: float = 1e-3
    p0_accel_bias: float = 1e-2
    p0_gyro_bias: float = 1e-3
    p0_window: float = 1e-2
    quat_radial_noise: float = 1e-10
    window_correlated: bool = True
    window_jitter: float = 1e-8
    process_noise: np.ndarray | None = None  # explicit 30x30 Q overrides the IMU-derived one

    def __post_init__(self):
        self.mode = ConfidenceMode(self.mode)
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        if self.ransac_threshold <= 0:
            raise ConfigError("RANSAC threshold must be positive")
        if self.max_features < 3:
            raise ConfigError("max_features must be >= 3")
        if self.sigma_px <= 0:
            raise ConfigError("sigma_px must be positive")
        if self.process_noise is not None:
            self.process_noise = np.asarray(self.process_noise, dtype=float)
            if self.process_noise.shape != (STATE_DIM, STATE_DIM):
                raise ConfigError("process_noise must be 30x30")

    @property
    def R_imu_cam(self) -> np.ndarray:
        return self.extrinsic.R

    def initial_covariance(self) -> np.ndarray:
        """Block-diagonal start covariance.

        The window starts as three copies of the initial pose.  With
        ``window_correlated`` the copies are fully correlated with the newest
        pose (plus ``window_jitter`` on their diagonal), so the first update
        does not treat the oldest view as an unrelated pose.
        """
        d = np.empty(STATE_DIM)
        d[P1] = self.p0_position
        d[V] = self.p0_velocity
        d[Q1] = self.p0_orientation
        d[BA] = self.p0_accel_bias
        d[BG] = self.p0_gyro_bias
        d[P2] = d[P3] = self.p0_window
        d[Q2] = d[Q3] = self.p0_orientation
        P = np.diag(d)
        if self.window_correlated:
            cp = np.sqrt(self.p0_position * self.p0_window) * np.eye(3)
            cq = self.p0_orientation * np.eye(4)
            for ps, qs in POSE_SLICES[1:]:
                P[P1, ps] = P[ps, P1] = cp
                P[Q1, qs] = P[qs, Q1] = cq
            P[P2, P3] = P[P3, P2] = self.p0_window * np.eye(3)
            P[Q2, Q3] = P[Q3, Q2] = cq
            for blk in (P2, Q2, P3, Q3):
                P[blk, blk] += self.window_jitter * np.eye(blk.stop - blk.start)
        return P

    def to_dict(self) -> dict:
        return {
            "extrinsic": {
                "q": self.extrinsic.rotation.as_array().tolist(),
                "t": self.extrinsic.translation.tolist(),
            },
            "intrinsics": asdict(self.intrinsics),
            "imu_noise": self.imu_noise.to_dict(),
            "gravity": self.gravity.tolist(),
            "sigma_px": self.sigma_px,
            "ransac_threshold": self.ransac_threshold,
            "ransac_iterations": self.ransac_iterations,
            "ransac_min_inlier_ratio": self.ransac_min_inlier_ratio,
            "max_features": self.max_features,
            "bucket_grid": list(self.bucket_grid),
            "sigma": asdict(self.sigma),
            "mode": self.mode.value,
            "confidence_floor": self.confidence_floor,
            "confidence_cap": self.confidence_cap,
            "confidence_cmax": self.confidence_cmax,
            "p0_position": self.p0_position,
            "p0_velocity": self.p0_velocity,
            "p0_orientation": self.p0_orientation,
            "p0_accel_bias": self.p0_accel_bias,
            "p0_gyro_bias": self.p0_gyro_bias,
            "p0_window": self.p0_window,
            "quat_radial_noise": self.quat_radial_noise,
            "window_correlated": self.window_correlated,
            "window_jitter": self.window_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VioConfig":
        d = dict(d)
        kw = {}
        if "extrinsic" in d:
            e = d.pop("extrinsic")
            kw["extrinsic"] = RigidPose(Quaternion.from_array(e["q"]).normalized(), e["t"], "imu", "camera")
        if "intrinsics" in d:
            kw["intrinsics"] = CameraIntrinsics(**d.pop("intrinsics"))
        if "imu_noise" in d:
            kw["imu_noise"] = ImuNoiseSpec.from_dict(d.pop("imu_noise"))
        if "sigma" in d:
            kw["sigma"] = SigmaParams(**d.pop("sigma"))
        if "bucket_grid" in d:
            kw["bucket_grid"] = tuple(d.pop("bucket_grid"))
        if "process_noise" in d and d["process_noise"] is not None:
            kw["process_noise"] = np.asarray(d.pop("process_noise"), dtype=float)
        d.pop("process_noise", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown VIO config keys: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)


# --------------------------------------------------------------------------
# transition


def _dcm(q: np.ndarray) -> np.ndarray:
    return geo._dcm_unchecked(q / np.linalg.norm(q, axis=-1, keepdims=True))


def _integration_knots(imu: ImuStream, t0: float, dt: float):
    """Sample times/values covering ``[t0, t0 + dt]`` (held at the ends)."""
    if len(imu) == 0:
        raise InvalidInputError("empty IMU window")
    t1 = t0 + dt
    t, a, g = imu.t, imu.accel, imu.gyro
    keep = (t > t0 + 1e-9) & (t < t1 - 1e-9)
    ts = [t0, *t[keep], t1]
    acc = np.vstack([_hold(t, a, t0), a[keep], _hold(t, a, t1)])
    gyr = np.vstack([_hold(t, g, t0), g[keep], _hold(t, g, t1)])
    return np.asarray(ts), acc, gyr


def _hold(t: np.ndarray, vals: np.ndarray, tq: float) -> np.ndarray:
    """Linear interpolation inside the samples, hold outside."""
    if tq <= t[0]:
        return vals[0]
    if tq >= t[-1]:
        return vals[-1]
    k = np.searchsorted(t, tq)
    w = (tq - t[k - 1]) / (t[k] - t[k - 1])
    return (1 - w) * vals[k - 1] + w * vals[k]


def transition(x: np.ndarray, imu: ImuStream, dt: float, gravity=DEFAULT_GRAVITY, t0: float | None = None) -> np.ndarray:
    """Propagate the window over one camera interval.

    Works on a single 30-vector or a ``(S, 30)`` stack of sigma points.
    Consecutive IMU samples are integrated with the trapezoidal (midpoint)
    rule under the uniformly-accelerated-motion model, then the window shifts.
    """
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    t0 = imu.t[0] if t0 is None else t0
    ts, acc, gyr = _integration_knots(imu, t0, dt)

    p = X[:, P1].copy()
    v = X[:, V].copy()
    q = X[:, Q1] / np.linalg.norm(X[:, Q1], axis=1, keepdims=True)
    ba = X[:, BA]
    bg = X[:, BG]
    g = np.asarray(gravity, dtype=float)

    R = geo._dcm_unchecked(q)
    a_prev = np.einsum("sij,sj->si", R, acc[0] - ba) + g
    for k in range(len(ts) - 1):
        h = ts[k + 1] - ts[k]
        if h <= 0:
            continue
        omega = 0.5 * (gyr[k] + gyr[k + 1]) - bg
        q = geo.quat_multiply(q, geo.quat_exp(omega * h))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        R = geo._dcm_unchecked(q)
        a_next = np.einsum("sij,sj->si", R, acc[k + 1] - ba) + g
        a = 0.5 * (a_prev + a_next)
        p = p + v * h + 0.5 * a * h * h
        v = v + a * h
        a_prev = a_next

    out = X.copy()
    out[:, P3], out[:, Q3] = X[:, P2], X[:, Q2]
    out[:, P2], out[:, Q2] = X[:, P1], X[:, Q1]
    out[:, P1], out[:, V], out[:, Q1] = p, v, q
    return out[0] if single else out


def process_noise(cfg: VioConfig, dt: float, n_intervals: int, q1: np.ndarray) -> np.ndarray:
    """Additive process covariance for one camera interval.

    Accelerometer white noise integrates into velocity/position, gyro noise
    into the attitude quaternion's tangent space, bias walks into the biases.
    The older window poses are exact copies and get no noise.
    """
    if cfg.process_noise is not None:
        return cfg.process_noise
    Q = np.zeros((STATE_DIM, STATE_DIM))
    n = cfg.imu_noise
    h = dt / max(n_intervals, 1)
    sa2 = n.sigma_na**2 * h
    I3 = np.eye(3)
    Q[P1, P1] = sa2 * dt**3 / 3.0 * I3
    Q[P1, V] = Q[V, P1] = sa2 * dt**2 / 2.0 * I3
    Q[V, V] = sa2 * dt * I3
    q = q1 / np.linalg.norm(q1)
    tangent = np.eye(4) - np.outer(q, q)
    Q[Q1, Q1] = 0.25 * n.sigma_ng**2 * h * dt * tangent
    # normalization removes radial spread from every window quaternion; a
    # tiny radial term keeps the covariance positive definite
    for qs in QUAT_BLOCKS:
        Q[qs, qs] += cfg.quat_radial_noise * np.eye(4)
    Q[BA, BA] = n.sigma_ba_walk**2 * dt * I3
    Q[BG, BG] = n.sigma_bg_walk**2 * dt * I3
    return Q


# --------------------------------------------------------------------------
# measurement model


def calibrated_cameras(X: np.ndarray, extrinsic: RigidPose) -> list[np.ndarray]:
    """World-to-camera ``[R | t]`` for the three window poses, ``(S, 3, 4)`` each."""
    X = np.atleast_2d(X)
    R_ic = extrinsic.R
    t_ic = extrinsic.translation
    cams = []
    for ps, qs in POSE_SLICES:
        R_wi = _dcm(X[:, qs])
        R_wc = R_wi @ R_ic
        c = X[:, ps] + R_wi @ t_ic
        R_cw = np.swapaxes(R_wc, -1, -2)
        t = -np.einsum("sij,sj->si", R_cw, c)
        cams.append(np.concatenate([R_cw, t[:, :, None]], axis=-1))
    return cams


@dataclass
class TransferSetup:
    """Per-feature fixed inputs of the measurement model."""

    features: list[FeatureTriple]
    f3n: np.ndarray  # (M, 3) calibrated view-3 points
    l2n: np.ndarray  # (M, 3) calibrated view-2 lines
    lines_px: np.ndarray  # (M, 3) view-2 lines in pixels
    z: np.ndarray  # (2M,) measured view-1 pixels
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.features)


def _arrays(features):
    uv1 = np.array([f.uv1 for f in features]).reshape(-1, 2)
    uv2 = np.array([f.uv2 for f in features]).reshape(-1, 2)
    uv3 = np.array([f.uv3 for f in features]).reshape(-1, 2)
    return uv1, uv2, uv3


def _homog(uv: np.ndarray) -> np.ndarray:
    return np.column_stack([uv, np.ones(len(uv))])


def prepare_transfer(x: np.ndarray, features: list[FeatureTriple], cfg: VioConfig) -> TransferSetup:
    """Pick the view-2 line of every feature using the geometry of state ``x``.

    Features whose transfer is degenerate at ``x`` (line through the epipole
    or a zero-baseline window) are dropped and counted.
    """
    if len(features) == 0:
        raise InvalidInputError("measurement model needs at least one feature")
    K = cfg.intrinsics
    P1c, P2c, P3c = (c[0] for c in calibrated_cameras(x, cfg.extrinsic))
    A1, A2 = geo.canonical_projections(P1c, P2c, P3c)
    uv1, uv2, uv3 = _arrays(features)
    f3n = _homog(uv3) @ K.K_inv.T
    E = geo.fundamental_from_canonical(A2)
    # epipolar lines of f3 in view-2 pixels: K^-T E f3n
    le = (f3n @ E.T) @ K.K_inv
    direction = np.column_stack([-le[:, 1], le[:, 0]])
    lines_px = geo.choose_lines(uv2, direction)
    l2n = lines_px @ K.K

    slices = geo.trifocal_slices(A1, A2)
    fro = np.linalg.norm(slices)
    if fro < geo.DEGENERATE_TENSOR_NORM:
        keep = np.zeros(len(features), dtype=bool)
    else:
        f3u = f3n / np.linalg.norm(f3n, axis=1, keepdims=True)
        l2u = l2n / np.linalg.norm(l2n, axis=1, keepdims=True)
        x1 = geo.transfer_normalized(slices / fro, f3u, l2u)
        keep = np.abs(x1[:, 2]) > geo.TRANSFER_SCALE_EPS
    kept = [f for f, k in zip(features, keep) if k]
    return TransferSetup(
        kept,
        f3n[keep],
        l2n[keep],
        lines_px[keep],
        uv1[keep].reshape(-1),
        int(np.count_nonzero(~keep)),
    )


def predict_measurements(X: np.ndarray, setup: TransferSetup, cfg: VioConfig) -> np.ndarray:
    """Transferred view-1 pixels for each state row, ``(S, 2M)``."""
    X = np.atleast_2d(X)
    P1c, P2c, P3c = calibrated_cameras(X, cfg.extrinsic)
    A1, A2 = geo.canonical_projections(P1c, P2c, P3c)
    slices = geo.trifocal_slices(A1, A2)
    x1 = geo.transfer_normalized(slices, setup.f3n, setup.l2n)  # (S, M, 3)
    K = cfg.intrinsics
    u = K.fx * x1[..., 0] / x1[..., 2] + K.cx
    v = K.fy * x1[..., 1] / x1[..., 2] + K.cy
    return np.stack([u, v], axis=-1).reshape(X.shape[0], -1)


def stack_measurement_model(x, features: list[FeatureTriple], cfg: VioConfig) -> tuple[np.ndarray, TransferSetup]:
    """Predicted stacked measurement ``[u_1, v_1, ..., u_M, v_M]`` at ``x``."""
    x = x.to_vector() if isinstance(x, VioState) else np.asarray(x, dtype=float)
    setup = prepare_transfer(x, features, cfg)
    if len(setup) == 0:
        return np.zeros(0), setup
    return predict_measurements(x, setup, cfg)[0], setup


# --------------------------------------------------------------------------
# RANSAC


@dataclass
class RansacResult:
    inliers: list[FeatureTriple]
    mask: np.ndarray
    n_hypotheses: int
    best_ratio: float
    fallback: bool


def _translation_system(x: np.ndarray, features: list[FeatureTriple], cfg: VioConfig):
    """Linear model of the transfer in the view-1 translation ``b4``.

    In the canonical frame ``x1n ∝ alpha * b4 - w`` with ``alpha`` and ``w``
    fixed by the (predicted) rotations and the two older poses.
    """
    K = cfg.intrinsics
    P1c, P2c, P3c = (c[0] for c in calibrated_cameras(x, cfg.extrinsic))
    A1, A2 = geo.canonical_projections(P1c, P2c, P3c)
    uv1, uv2, uv3 = _arrays(features)
    f3n = _homog(uv3) @ K.K_inv.T
    E = geo.fundamental_from_canonical(A2)
    le = (f3n @ E.T) @ K.K_inv
    lines = geo.choose_lines(uv2, np.column_stack([-le[:, 1], le[:, 0]]))
    l2n = lines @ K.K
    alpha = np.einsum("mi,ij,mj->m", l2n, A2[:, :3], f3n)
    w = (l2n @ A2[:, 3])[:, None] * (f3n @ A1[:, :3].T)
    n1 = _homog(uv1) @ K.K_inv.T  # measured view-1 points, calibrated
    return alpha, w, n1, A1[:, 3]


def _transfer_errors(b4: np.ndarray, alpha, w, uv1, K: CameraIntrinsics) -> np.ndarray:
    """Pixel errors for hypotheses ``b4`` of shape ``(H, 3)`` -> ``(H, M)``."""
    x1 = alpha[None, :, None] * b4[:, None, :] - w[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * x1[..., 0] / x1[..., 2] + K.cx
        v = K.fy * x1[..., 1] / x1[..., 2] + K.cy
    err = np.hypot(u - uv1[:, 0], v - uv1[:, 1])
    return np.where(np.isfinite(err), err, np.inf)


def ransac_gate(
    features: list[FeatureTriple],
    predicted_state,
    threshold: float,
    iterations: int,
    rng_seed=None,
    cfg: VioConfig | None = None,
    min_inlier_ratio: float | None = None,
) -> RansacResult:
    """3-point RANSAC with rotations fixed from the predicted state.

    Each hypothesis refits the newest camera translation from three sampled
    features by linear least squares; features whose transfer error is below
    ``threshold`` pixels count as inliers.
    """
    cfg = cfg or VioConfig()
    min_ratio = cfg.ransac_min_inlier_ratio if min_inlier_ratio is None else min_inlier_ratio
    x = predicted_state.to_vector() if isinstance(predicted_state, VioState) else np.asarray(predicted_state)
    m = len(features)
    if m < 3:
        log.warning("RANSAC needs 3 features, got %d; passing all through", m)
        return RansacResult(list(features), np.ones(m, dtype=bool), 0, 1.0, True)
    K = cfg.intrinsics
    alpha, w, n1, b4_pred = _translation_system(x, features, cfg)
    uv1 = _arrays(features)[0]

    # rows: alpha*(b4_x - u*b4_z) = w_x - u*w_z, alpha*(b4_y - v*b4_z) = w_y - v*w_z
    rows_u = alpha[:, None] * np.column_stack([np.ones(m), np.zeros(m), -n1[:, 0]])
    rows_v = alpha[:, None] * np.column_stack([np.zeros(m), np.ones(m), -n1[:, 1]])
    rhs_u = w[:, 0] - n1[:, 0] * w[:, 2]
    rhs_v = w[:, 1] - n1[:, 1] * w[:, 2]

    rng = np.random.default_rng(rng_seed)
    samples = np.array([rng.choice(m, 3, replace=False) for _ in range(iterations)])
    A = np.concatenate([rows_u[samples], rows_v[samples]], axis=1)  # (H, 6, 3)
    b = np.concatenate([rhs_u[samples], rhs_v[samples]], axis=1)  # (H, 6)
    hyps = []
    for Ah, bh in zip(A, b):
        sol, *_ = np.linalg.lstsq(Ah, bh, rcond=None)
        hyps.append(sol)
    hyps = np.array(hyps)
    err = _transfer_errors(hyps, alpha, w, uv1, K)
    inl = err < threshold
    counts = inl.sum(axis=1)
    score = np.where(inl, err, threshold).sum(axis=1)
    order = np.lexsort((score, -counts))
    best = order[0]
    ratio = counts[best] / m
    if ratio < min_ratio:
        err_pred = _transfer_errors(b4_pred[None], alpha, w, uv1, K)[0]
        mask = err_pred < threshold
        return RansacResult([f for f, k in zip(features, mask) if k], mask, iterations, float(ratio), True)
    mask = inl[best]
    return RansacResult([f for f, k in zip(features, mask) if k], mask, iterations, float(ratio), False)


# --------------------------------------------------------------------------
# bucketing


def bucket_features(features: list[FeatureTriple], intrinsics: CameraIntrinsics, grid=(8, 4), max_features=100):
    """Keep at most ``max_features``, spread over a ``grid`` of image cells.

    Within a cell longer-lived tracks are preferred; cells are visited
    round-robin so dense regions cannot starve sparse ones.
    """
    if len(features) <= max_features:
        return list(features)
    nx, ny = grid
    cells: dict[tuple[int, int], list[FeatureTriple]] = {}
    for f in features:
        cx = min(max(int(f.uv1[0] / intrinsics.width * nx), 0), nx - 1)
        cy = min(max(int(f.uv1[1] / intrinsics.height * ny), 0), ny - 1)
        cells.setdefault((cy, cx), []).append(f)
    queues = [sorted(v, key=lambda f: (-f.age, f.track_id)) for _, v in sorted(cells.items())]
    out: list[FeatureTriple] = []
    depth = 0
    while len(out) < max_features:
        added = False
        for q in queues:
            if depth < len(q):
                out.append(q[depth])
                added = True
                if len(out) == max_features:
                    break
        if not added:
            break
        depth += 1
    return sorted(out, key=lambda f: f.track_id)


# --------------------------------------------------------------------------
# one filter step


@dataclass
class StepDiagnostics:
    frame: int
    n_features: int = 0
    n_bucketed: int = 0
    n_dropped: int = 0
    n_inliers: int = 0
    ransac_fallback: bool = False
    updated: bool = False
    reason: str = ""
    tau: float | None = None
    mean_confidence: float | None = None
    mean_weight: float | None = None
    speed: float | None = None
    gyro_norm: float | None = None
    innovation_rms: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def initial_state(cfg: VioConfig, p, q, v, b_a=None, b_g=None) -> GaussianState:
    x = VioState.at_rest_window(p, q, v, b_a, b_g).to_vector()
    return GaussianState(x, cfg.initial_covariance())


def _transition_fn(cfg: VioConfig, t0: float):
    def f(X, u):
        imu, dt = u
        return transition(X, imu, dt, cfg.gravity, t0)

    return f


def predict(state: GaussianState, imu: ImuStream, t0: float, dt: float, cfg: VioConfig) -> GaussianState:
    n_int = max(len(_integration_knots(imu, t0, dt)[0]) - 1, 1)
    Q = process_noise(cfg, dt, n_int, state.mean[Q1])
    return ukf_predict(state, _transition_fn(cfg, t0), Q, (imu, dt), cfg.sigma, QUAT_BLOCKS, vectorized=True)


def update(
    state: GaussianState,
    setup: TransferSetup,
    cfg: VioConfig,
    confidence: ConfidenceMatrix | None = None,
    return_info: bool = False,
):
    m = len(setup)
    R = cfg.sigma_px**2 * np.eye(2 * m)

    def h(X):
        return predict_measurements(X, setup, cfg)

    return ukf_update(
        state, h, setup.z, R, confidence, cfg.sigma, QUAT_BLOCKS, vectorized=True, return_info=return_info
    )


def vio_step(
    state: GaussianState,
    imu: ImuStream,
    t0: float,
    dt: float,
    features: list[FeatureTriple],
    cfg: VioConfig,
    frame: int = 0,
    rng_seed=None,
    allow_update: bool = True,
) -> tuple[GaussianState, StepDiagnostics]:
    """Predict, gate, infer confidence and update for one camera frame."""
    diag = StepDiagnostics(frame, n_features=len(features))
    pred = predict(state, imu, t0, dt, cfg)
    if not allow_update:
        diag.reason = "bootstrap"
        return pred, diag
    if not features:
        diag.reason = "no features"
        return pred, diag

    feats = bucket_features(features, cfg.intrinsics, cfg.bucket_grid, cfg.max_features)
    diag.n_bucketed = len(feats)
    setup = prepare_transfer(pred.mean, feats, cfg)
    diag.n_dropped = setup.dropped
    if len(setup) == 0:
        diag.reason = "degenerate geometry"
        return pred, diag

    rs = ransac_gate(setup.features, pred.mean, cfg.ransac_threshold, cfg.ransac_iterations, rng_seed, cfg)
    diag.ransac_fallback = rs.fallback
    diag.n_inliers = len(rs.inliers)
    if not rs.inliers:
        diag.reason = "no inliers"
        return pred, diag
    keep = np.repeat(rs.mask, 2)
    setup = TransferSetup(rs.inliers, setup.f3n[rs.mask], setup.l2n[rs.mask], setup.lines_px[rs.mask], setup.z[keep])

    # confidence from the predicted motion and the raw gyro readings
    x = pred.mean
    gyro_m = imu.gyro.mean(axis=0)
    bearings = cfg.intrinsics.bearing(np.array([f.uv1 for f in rs.inliers]))
    conf = infer_confidence(x[V], _dcm(x[Q1]), cfg.R_imu_cam, bearings, gyro_m)
    weights = confidence_weights(conf, cfg.mode, cfg.confidence_cmax)
    if cfg.mode is ConfidenceMode.OFF:
        C_f = ConfidenceMatrix.identity(len(rs.inliers))
    else:
        C_f = build_confidence_matrix(weights, cfg.confidence_floor, cfg.confidence_cap)
    diag.tau = conf.tau
    diag.mean_confidence = float(np.mean(conf.confidence))
    diag.mean_weight = float(np.mean(C_f.scales))
    diag.speed = float(np.linalg.norm(x[V]))
    diag.gyro_norm = float(np.linalg.norm(gyro_m))

    post, info = update(pred, setup, cfg, C_f, return_info=True)
    diag.innovation_rms = float(np.sqrt(np.mean(info.innovation**2)))
    diag.updated = True
    return post, diag


class VioPipeline:
    """Stateful driver: one instance per sequence, not shared across threads."""

    def __init__(self, cfg: VioConfig, initial: GaussianState, t0: float, seed: int = 0):
        self.cfg = cfg
        self.state = initial.copy()
        self.t = float(t0)
        self.frame = 0
        self.seed = seed
        self.diagnostics: list[StepDiagnostics] = []

    def step(self, t: float, imu: ImuStream, features: list[FeatureTriple]) -> StepDiagnostics:
        dt = t - self.t
        self.frame += 1
        # updates need a full window of three distinct frames
        allow = self.frame >= 2
        try:
            self.state, diag = vio_step(
                self.state,
                imu,
                self.t,
                dt,
                features,
                self.cfg,
                frame=self.frame,
                rng_seed=(self.seed, self.frame),
                allow_update=allow,
            )
        except NumericalFailureError as exc:
            raise NumericalFailureError(f"frame {self.frame}: {exc}") from exc
        self.t = t
        self.diagnostics.append(diag)
        return diag

    @property
    def pose(self) -> tuple[np.ndarray, np.ndarray]:
        return self.state.mean[P1].copy(), self.state.mean[Q1].copy()


@dataclass
class SequenceResult:
    """Filter output for a whole sequence: one pose per camera frame."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    diagnostics: list[StepDiagnostics]
    final: GaussianState


def run_sequence(
    cfg: VioConfig,
    initial: GaussianState,
    frame_times: np.ndarray,
    imu: ImuStream,
    tracks,
    seed: int = 0,
    first_frame: int = 0,
) -> SequenceResult:
    """Drive a :class:`VioPipeline` over every camera frame.

    ``tracks`` is a :class:`~confvio.tracks.TrackSet`; frame ``k`` of
    ``frame_times`` corresponds to track frame ``first_frame + k``.
    """
    frame_times = np.asarray(frame_times, dtype=float)
    if frame_times.size == 0:
        raise InvalidInputError("no camera frames")
    if np.any(np.diff(frame_times) <= 0):
        raise InvalidInputError("camera timestamps must be strictly increasing")
    pipe = VioPipeline(cfg, initial, frame_times[0], seed)
    n = len(frame_times)
    p = np.empty((n, 3))
    q = np.empty((n, 4))
    v = np.empty((n, 3))
    p[0], q[0], v[0] = initial.mean[P1], initial.mean[Q1], initial.mean[V]
    for k in range(1, n):
        window = imu.window(frame_times[k - 1], frame_times[k])
        if len(window) == 0:
            raise InvalidInputError(f"no IMU samples between frames {k - 1} and {k}")
        pipe.step(frame_times[k], window, tracks.triples_at(first_frame + k))
        m = pipe.state.mean
        p[k], q[k], v[k] = m[P1], m[Q1], m[V]
    return SequenceResult(frame_times.copy(), p, q, v, pipe.diagnostics, pipe.state)
