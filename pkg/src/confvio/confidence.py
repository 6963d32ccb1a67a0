"""Feature confidence from motion direction and forward-motion ratio.

A feature's angular confidence is the angle between the camera velocity and
the feature's viewing ray; the forward-motion ratio ``tau`` scales it down
when the vehicle is rotating rather than translating.  The per-feature
values scale the measurement noise blocks in the filter update.

Also hosts the street-scene statistics (depth vs. angle to the motion axis).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .errors import InvalidInputError
from .ukf import ConfidenceMatrix

VELOCITY_EPS = 1e-6  # m/s
CONFIDENCE_FLOOR = 0.05
CONFIDENCE_CAP = 20.0
MIN_STATS_SAMPLES = 100
INVERSION_CMAX = np.pi


class ConfidenceMode(str, Enum):
    """How per-feature confidences enter the measurement noise.

    ``literal`` multiplies ``c_m`` into R as written; ``inverted`` uses
    ``pi - c_m`` so on-axis features get the larger noise; ``off`` is the
    unweighted baseline (``C_f = I``).
    """

    OFF = "off"
    LITERAL = "literal"
    INVERTED = "inverted"


@dataclass(frozen=True)
class ConfidenceVector:
    angle: np.ndarray  # c_t,m, rad
    tau: float
    confidence: np.ndarray  # c_m = tau * c_t,m
    moving: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInputError(f"tau={self.tau} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.confidence)


def angle_confidence(camera_velocity, bearing, eps: float = VELOCITY_EPS):
    """Angle (rad) between camera velocity and feature ray(s).

    ``bearing`` may be ``(3,)`` or ``(M, 3)``.  Below ``eps`` the motion
    direction is undefined and the neutral confidence 1 is returned.
    """
    v = np.asarray(camera_velocity, dtype=float)
    f = np.asarray(bearing, dtype=float)
    speed = np.linalg.norm(v)
    if speed < eps:
        return 1.0 if f.ndim == 1 else np.ones(len(f))
    # atan2 form stays accurate near 0 and pi where arccos loses digits
    ang = np.arctan2(np.linalg.norm(np.cross(f, v), axis=-1), f @ v)
    return float(ang) if np.ndim(ang) == 0 else ang


def forward_motion_ratio(v_world, gyro_m) -> float:
    """``tau = |v| / (|g_m| + |v|)``, defined as 0 when both norms vanish."""
    nv = float(np.linalg.norm(v_world))
    ng = float(np.linalg.norm(gyro_m))
    if nv + ng == 0.0:
        return 0.0
    return nv / (ng + nv)


def combine(c_t, tau: float) -> ConfidenceVector:
    if not 0.0 <= tau <= 1.0:
        raise InvalidInputError(f"tau={tau} outside [0, 1]")
    c_t = np.asarray(c_t, dtype=float).reshape(-1)
    return ConfidenceVector(c_t, float(tau), tau * c_t)


def confidence_weights(c: ConfidenceVector, mode: ConfidenceMode | str, c_max: float = INVERSION_CMAX) -> np.ndarray:
    """Per-feature noise scale factors before clamping.

    ``inverted`` returns ``c_max - c_m``: features near the motion axis get
    the largest noise inflation and those at ``c_m >= c_max`` hit the floor.
    """
    mode = ConfidenceMode(mode)
    if mode is ConfidenceMode.OFF or not c.moving:
        return np.ones(len(c))
    if mode is ConfidenceMode.LITERAL:
        return c.confidence
    return c_max - c.confidence


def build_confidence_matrix(weights, floor: float = CONFIDENCE_FLOOR, cap: float = CONFIDENCE_CAP) -> ConfidenceMatrix:
    """``bl_diag(clamp(c_1) I_2, ..., clamp(c_M) I_2)``."""
    if isinstance(weights, ConfidenceVector):
        weights = weights.confidence
    w = np.clip(np.asarray(weights, dtype=float).reshape(-1), floor, cap)
    return ConfidenceMatrix(w, 2)


def camera_velocity(v_world, R_world_imu: np.ndarray, R_imu_cam: np.ndarray) -> np.ndarray:
    """``^C v = R_IC^T R_WI^T ^W v``."""
    return R_imu_cam.T @ (R_world_imu.T @ np.asarray(v_world, dtype=float))


def infer_confidence(v_world, R_world_imu, R_imu_cam, bearings, gyro_m, eps: float = VELOCITY_EPS) -> ConfidenceVector:
    """Confidence for all inlier features of a frame.

    ``bearings`` are view-1 viewing rays in the camera frame.  At rest the
    motion direction is undefined and every feature gets neutral weight 1.
    """
    bearings = np.atleast_2d(np.asarray(bearings, dtype=float))
    tau = forward_motion_ratio(v_world, gyro_m)
    cv = camera_velocity(v_world, R_world_imu, R_imu_cam)
    ang = angle_confidence(cv, bearings, eps)
    if np.linalg.norm(cv) < eps:
        return ConfidenceVector(ang, tau, np.ones(len(bearings)), moving=False)
    return combine(ang, tau)


# --------------------------------------------------------------------------
# street statistics


@dataclass
class StreetStats:
    counts: np.ndarray  # (n_angle_bins, n_depth_bins)
    angle_edges: np.ndarray
    depth_edges: np.ndarray
    n_samples: int
    spearman: float | None = None
    spearman_p: float | None = None
    pearson: float | None = None
    extra: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        """Rows ``angle_bin, depth_bin, count`` with bin centers."""
        ac = 0.5 * (self.angle_edges[:-1] + self.angle_edges[1:])
        dc = 0.5 * (self.depth_edges[:-1] + self.depth_edges[1:])
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["angle_bin", "depth_bin", "count"])
            for i, a in enumerate(ac):
                for j, d in enumerate(dc):
                    w.writerow([f"{a:.6f}", f"{d:.6f}", int(self.counts[i, j])])

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "spearman": self.spearman,
            "spearman_p": self.spearman_p,
            "pearson": self.pearson,
            **self.extra,
        }


def feature_angles(points_cam: np.ndarray, motion_axis_cam) -> np.ndarray:
    """Angle between each camera-frame 3D point and the motion axis."""
    axis = np.asarray(motion_axis_cam, dtype=float)
    axis = axis / np.linalg.norm(axis)
    p = np.asarray(points_cam, dtype=float)
    return np.arctan2(np.linalg.norm(np.cross(p, axis), axis=-1), p @ axis)


def street_statistics(
    angles,
    depths,
    angle_bins: int | np.ndarray = 30,
    depth_bins: int | np.ndarray = 40,
    angle_range: tuple[float, float] = (0.0, np.pi / 2),
    depth_range: tuple[float, float] = (0.0, 80.0),
) -> StreetStats:
    """2D histogram of (angle to motion axis, depth) plus rank correlation.

    Samples outside the histogram ranges still count toward the correlation
    but are clipped into the edge bins so counts sum to the sample count.
    """
    a = np.asarray(angles, dtype=float).reshape(-1)
    d = np.asarray(depths, dtype=float).reshape(-1)
    if a.shape != d.shape:
        raise InvalidInputError("angles and depths must have equal length")
    ae = angle_bins if isinstance(angle_bins, np.ndarray) else np.linspace(*angle_range, angle_bins + 1)
    de = depth_bins if isinstance(depth_bins, np.ndarray) else np.linspace(*depth_range, depth_bins + 1)
    ac = np.clip(a, ae[0], ae[-1])
    dc = np.clip(d, de[0], de[-1])
    counts, _, _ = np.histogram2d(ac, dc, bins=[ae, de])
    stats = StreetStats(counts.astype(np.int64), ae, de, int(a.size))
    if a.size >= MIN_STATS_SAMPLES:
        rho, p = spearmanr(a, d)
        stats.spearman = float(rho)
        stats.spearman_p = float(p)
        stats.pearson = float(np.corrcoef(a, d)[0, 1])
    return stats
