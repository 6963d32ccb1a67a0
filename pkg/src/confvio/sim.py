"""Synthetic street scenes: trajectories, IMU streams and feature tracks.

A vehicle drives a planar analytic path at constant forward speed through a
corridor of landmarks.  Two landmark populations model a residential street:

* wall landmarks on both sides of the road at ``+-width/2`` (near, off-axis
  for most of their visible life), and
* far-field landmarks above the road ahead (tree tops, building fronts at
  the end of the street); they leave the top of the image before they come
  close, so they are observed only when distant and near the motion axis.

Everything derives from closed-form positions, velocities and accelerations,
so the synthesized IMU readings are exact up to the injected noise.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .geometry import CameraIntrinsics, Quaternion, RigidPose, _dcm_unchecked
from .imu import DEFAULT_GRAVITY, ImuBias, ImuNoiseSpec, ImuStream, add_white_noise, synthesize_stream
from .tracks import TrackSet, read_tracks_csv, write_tracks_csv
from .vio import R_IMU_CAM_KITTI

log = logging.getLogger(__name__)

TRAJECTORY_KINDS = ("straight", "s-curve", "turn", "circuit")
GT_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]
IMU_HEADER = ["t", "ax", "ay", "az", "gx", "gy", "gz"]
BUNDLE_FILES = ("ground_truth.csv", "imu.csv", "tracks.csv", "meta.json")

# an observation counts as "distant and on-axis" beyond this depth and
# within this angle of the direction of travel
DISTANT_DEPTH = 20.0  # m
ON_AXIS_ANGLE = np.deg2rad(20.0)


@dataclass
class ScenarioConfig:
    kind: str = "straight"
    duration: float = 30.0  # s
    speed: float = 10.0  # m/s, constant forward speed
    width: float = 15.0  # m, wall-to-wall
    feature_density: float = 6.0  # landmarks per metre of path
    depth_range: tuple[float, float] = (1.0, 100.0)  # visible depth, m
    distant_fraction: float = 0.6  # share of far-field landmarks
    camera_rate: float = 10.0  # Hz
    imu_rate: float = 100.0  # Hz
    pixel_noise: float = 1.0  # px
    imu_noise: ImuNoiseSpec = field(default_factory=ImuNoiseSpec.low_cost)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)  # constant true bias, m/s^2
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)  # constant true bias, rad/s
    seed: int = 0
    amplitude: float = 5.0  # s-curve lateral amplitude, m
    wavelength: float = 150.0  # s-curve period along x, m
    turn_sharpness: float = 20.0  # turn transition length, m
    radius: float = 50.0  # circuit radius, m
    imu_height: float = 1.0  # m above ground
    wall_height: tuple[float, float] = (0.0, 4.0)  # m above ground
    far_height: tuple[float, float] = (5.0, 12.0)  # m above the camera
    border: float = 2.0  # px, minimum distance of emitted pixels to the image edge
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.kitti_like)
    extrinsic: RigidPose = field(
        default_factory=lambda: RigidPose(Quaternion.from_dcm(R_IMU_CAM_KITTI), np.array([0.3, 0.0, 0.65]), "imu", "camera")
    )

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.wall_height = tuple(float(v) for v in self.wall_height)
        self.far_height = tuple(float(v) for v in self.far_height)
        self.accel_bias = tuple(float(v) for v in self.accel_bias)
        self.gyro_bias = tuple(float(v) for v in self.gyro_bias)
        if len(self.accel_bias) != 3 or len(self.gyro_bias) != 3:
            raise ConfigError("IMU biases must be 3-vectors")
        if self.kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory kind {self.kind!r}; expected one of {TRAJECTORY_KINDS}")
        if self.camera_rate <= 0 or self.imu_rate <= 0:
            raise ConfigError("sensor rates must be positive")
        if self.imu_rate < self.camera_rate:
            raise ConfigError(f"IMU rate {self.imu_rate} Hz is below camera rate {self.camera_rate} Hz")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.speed < 0:
            raise ConfigError("speed must be non-negative")
        if self.feature_density <= 0 or self.width <= 0:
            raise ConfigError("feature density and corridor width must be positive")
        if not 0.0 <= self.distant_fraction <= 1.0:
            raise ConfigError("distant_fraction must lie in [0, 1]")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ConfigError("depth_range must satisfy 0 < near < far")
        if self.pixel_noise < 0:
            raise ConfigError("pixel noise must be non-negative")
        if self.kind == "circuit" and self.radius <= 0:
            raise ConfigError("circuit radius must be positive")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.camera_rate)) + 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "duration": self.duration,
            "speed": self.speed,
            "width": self.width,
            "feature_density": self.feature_density,
            "depth_range": list(self.depth_range),
            "distant_fraction": self.distant_fraction,
            "camera_rate": self.camera_rate,
            "imu_rate": self.imu_rate,
            "pixel_noise": self.pixel_noise,
            "imu_noise": self.imu_noise.to_dict(),
            "accel_bias": list(self.accel_bias),
            "gyro_bias": list(self.gyro_bias),
            "seed": self.seed,
            "amplitude": self.amplitude,
            "wavelength": self.wavelength,
            "turn_sharpness": self.turn_sharpness,
            "radius": self.radius,
            "imu_height": self.imu_height,
            "wall_height": list(self.wall_height),
            "far_height": list(self.far_height),
            "border": self.border,
            "intrinsics": {
                "fx": self.intrinsics.fx,
                "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx,
                "cy": self.intrinsics.cy,
                "width": self.intrinsics.width,
                "height": self.intrinsics.height,
            },
            "extrinsic": {
                "q": self.extrinsic.rotation.as_array().tolist(),
                "t": self.extrinsic.translation.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        kw = {}
        if "imu_noise" in d:
            kw["imu_noise"] = ImuNoiseSpec.from_dict(d.pop("imu_noise"))
        if "intrinsics" in d:
            kw["intrinsics"] = CameraIntrinsics(**d.pop("intrinsics"))
        if "extrinsic" in d:
            e = d.pop("extrinsic")
            kw["extrinsic"] = RigidPose(Quaternion.from_array(e["q"]).normalized(), e["t"], "imu", "camera")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kw.update(d)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# trajectories


def path_shape(cfg: ScenarioConfig, s: np.ndarray):
    """Planar path as a function of the path parameter ``s`` (metres).

    Returns ``(xy, d1, d2, heading)`` where ``d1``/``d2`` are the first and
    second derivatives of ``xy`` with respect to ``s``.
    """
    s = np.asarray(s, dtype=float)
    zero, one = np.zeros_like(s), np.ones_like(s)
    if cfg.kind == "circuit":
        r = cfg.radius
        th = s / r
        xy = np.stack([r * np.sin(th), r * (1 - np.cos(th))], -1)
        d1 = np.stack([np.cos(th), np.sin(th)], -1)
        d2 = np.stack([-np.sin(th), np.cos(th)], -1) / r
        return xy, d1, d2, th
    if cfg.kind == "straight":
        f, f1, f2 = zero, zero, zero
    elif cfg.kind == "s-curve":
        k = 2 * np.pi / cfg.wavelength
        f = cfg.amplitude * np.sin(k * s)
        f1 = cfg.amplitude * k * np.cos(k * s)
        f2 = -cfg.amplitude * k * k * np.sin(k * s)
    else:  # turn: heading eases from 0 to 45 degrees around the middle of the run
        c = cfg.turn_sharpness
        s0 = 0.5 * cfg.speed * cfg.duration
        u = (s - s0) / c
        f = c * (np.logaddexp(u, -u) - np.log(2.0))
        f1 = np.tanh(u)
        f2 = (1.0 - np.tanh(u) ** 2) / c
    xy = np.stack([s, f], -1)
    d1 = np.stack([one, f1], -1)
    d2 = np.stack([zero, f2], -1)
    return xy, d1, d2, np.arctan(f1)


@dataclass
class Kinematics:
    t: np.ndarray
    p: np.ndarray  # (N, 3) world-from-IMU positions
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray  # (N, 4) world-from-IMU
    omega: np.ndarray  # (N, 3) body rates


def kinematics(cfg: ScenarioConfig, t: np.ndarray) -> Kinematics:
    """Closed-form motion at times ``t`` (yaw-only attitude, constant height)."""
    t = np.asarray(t, dtype=float)
    sp = cfg.speed
    xy, d1, d2, heading = path_shape(cfg, sp * t)
    n = len(t)
    p = np.column_stack([xy, np.full(n, cfg.imu_height)])
    v = np.column_stack([d1 * sp, np.zeros(n)])
    a = np.column_stack([d2 * sp * sp, np.zeros(n)])
    yaw_rate = sp * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / np.sum(d1 * d1, axis=1)
    q = np.column_stack([np.cos(heading / 2), np.zeros(n), np.zeros(n), np.sin(heading / 2)])
    omega = np.column_stack([np.zeros(n), np.zeros(n), yaw_rate])
    return Kinematics(t, p, v, a, q, omega)


# --------------------------------------------------------------------------
# scene


@dataclass
class GroundTruth:
    """Camera-rate truth plus the landmark map behind the tracks."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    landmarks: np.ndarray  # (L, 3) world points
    landmark_far: np.ndarray  # (L,) bool, far-field population
    track_landmark: dict[int, int]  # track id -> landmark index

    def __len__(self) -> int:
        return len(self.t)

    def pose(self, i: int) -> RigidPose:
        return RigidPose(Quaternion.from_array(self.q[i]), self.p[i], "world", "imu")

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.p, axis=0), axis=1)))


@dataclass
class Scenario:
    config: ScenarioConfig
    ground_truth: GroundTruth
    imu: ImuStream  # as delivered to the filter (noise applied)
    tracks: TrackSet
    stats: dict
    # per-observation angle to the direction of travel and depth, if known
    angles: np.ndarray | None = field(default=None, repr=False)
    depths: np.ndarray | None = field(default=None, repr=False)

    @property
    def frame_times(self) -> np.ndarray:
        return self.ground_truth.t


def _place_landmarks(cfg: ScenarioConfig, rng: np.random.Generator):
    pad = cfg.depth_range[1]
    s_lo, s_hi = -pad, cfg.speed * cfg.duration + pad
    n_total = max(int(round(cfg.feature_density * (s_hi - s_lo))), 1)
    n_far = int(round(cfg.distant_fraction * n_total))
    n_wall = n_total - n_far

    def anchors(n):
        s = np.sort(rng.uniform(s_lo, s_hi, n))
        xy, d1, _, _ = path_shape(cfg, s)
        normal = np.column_stack([-d1[:, 1], d1[:, 0]]) / np.linalg.norm(d1, axis=1, keepdims=True)
        return xy, normal

    xy, nrm = anchors(n_wall)
    side = np.where(rng.random(n_wall) < 0.5, -1.0, 1.0)
    lateral = side * 0.5 * cfg.width + rng.uniform(-0.5, 0.5, n_wall)
    wall = np.column_stack([xy + nrm * lateral[:, None], rng.uniform(*cfg.wall_height, n_wall)])

    xy, nrm = anchors(n_far)
    lateral = rng.uniform(-0.5, 0.5, n_far) * cfg.width
    cam_h = cfg.imu_height + cfg.extrinsic.translation[2]
    far = np.column_stack([xy + nrm * lateral[:, None], cam_h + rng.uniform(*cfg.far_height, n_far)])
    pts = np.vstack([wall, far])
    is_far = np.concatenate([np.zeros(n_wall, bool), np.ones(n_far, bool)])
    return pts, is_far


def _camera_poses(cfg: ScenarioConfig, kin: Kinematics):
    R_wi = _dcm_unchecked(kin.q)
    R_ic = cfg.extrinsic.R
    R_wc = R_wi @ R_ic
    c = kin.p + R_wi @ cfg.extrinsic.translation
    return R_wc, c


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Ground truth, noisy IMU stream and noisy feature tracks for ``cfg``.

    Deterministic per ``cfg.seed``; landmarks, pixel noise and IMU noise use
    independent child streams of the seed.
    """
    ss_land, ss_pix, ss_imu = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_land = np.random.default_rng(ss_land)
    rng_pix = np.random.default_rng(ss_pix)

    n_frames = cfg.n_frames
    t_cam = np.arange(n_frames) / cfg.camera_rate
    n_imu = int(round(cfg.duration * cfg.imu_rate)) + 1
    t_imu = np.arange(n_imu) / cfg.imu_rate

    kin_cam = kinematics(cfg, t_cam)
    kin_imu = kinematics(cfg, t_imu)
    bias = ImuBias(cfg.accel_bias, cfg.gyro_bias)
    clean = synthesize_stream(t_imu, kin_imu.a, kin_imu.omega, kin_imu.q, bias, gravity=DEFAULT_GRAVITY)
    imu = degrade_imu(clean, cfg.imu_noise, ss_imu)

    pts, is_far = _place_landmarks(cfg, rng_land)
    R_wc, centers = _camera_poses(cfg, kin_cam)
    K = cfg.intrinsics
    near, far_lim = cfg.depth_range
    b = cfg.border

    current = np.full(len(pts), -1, dtype=np.int64)
    next_id = 0
    frames, ids, uvs = [], [], []
    track_landmark: dict[int, int] = {}
    n_obs = n_distant = 0
    angles, depths = [], []
    for j in range(n_frames):
        pc = (pts - centers[j]) @ R_wc[j]  # camera-frame points
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * pc[:, 0] / z + K.cx
            v = K.fy * pc[:, 1] / z + K.cy
        vis = (z > near) & (z < far_lim) & (u >= b) & (u <= K.width - b) & (v >= b) & (v <= K.height - b)
        idx = np.flatnonzero(vis)
        if idx.size == 0:
            raise ConfigError(f"no landmark visible at frame {j}; increase feature_density or depth range")
        current[~vis] = -1
        new = idx[current[idx] < 0]
        current[new] = np.arange(next_id, next_id + new.size)
        for lm, tid in zip(new, current[new]):
            track_landmark[int(tid)] = int(lm)
        next_id += new.size

        noise = cfg.pixel_noise * rng_pix.standard_normal((idx.size, 2))
        uv = np.column_stack([u[idx], v[idx]]) + noise
        uv[:, 0] = np.clip(uv[:, 0], 0.0, K.width)
        uv[:, 1] = np.clip(uv[:, 1], 0.0, K.height)
        frames.append(np.full(idx.size, j))
        ids.append(current[idx])
        uvs.append(uv)

        # statistics w.r.t. the direction of travel in the camera frame
        vc = R_wc[j].T @ kin_cam.v[j]
        sp = np.linalg.norm(vc)
        axis = vc / sp if sp > 1e-9 else np.array([0.0, 0.0, 1.0])
        pv = pc[idx]
        rng_ = np.linalg.norm(pv, axis=1)
        ang = np.arccos(np.clip(pv @ axis / rng_, -1, 1))
        angles.append(ang)
        depths.append(z[idx])
        n_obs += idx.size
        n_distant += int(np.count_nonzero((z[idx] >= DISTANT_DEPTH) & (ang <= ON_AXIS_ANGLE)))

    tracks = TrackSet.from_rows(np.concatenate(frames), np.concatenate(ids), np.vstack(uvs))
    gt = GroundTruth(t_cam, kin_cam.p, kin_cam.q, kin_cam.v, pts, is_far, track_landmark)
    stats = {
        "n_observations": n_obs,
        "n_tracks": next_id,
        "n_landmarks": int(len(pts)),
        "landmark_distant_fraction": float(is_far.mean()),
        "distant_on_axis_fraction": n_distant / n_obs,
        "mean_features_per_frame": n_obs / n_frames,
        "path_length": gt.path_length(),
    }
    return Scenario(cfg, gt, imu, tracks, stats, np.concatenate(angles), np.concatenate(depths))


def observation_geometry(sc: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation (angle to direction of travel, depth) pairs."""
    if sc.angles is not None:
        return sc.angles, sc.depths
    return observation_geometry_from_truth(sc.config, sc.ground_truth, sc.tracks)


def observation_geometry_from_truth(cfg: ScenarioConfig, gt: GroundTruth, tracks: TrackSet):
    """Recompute angles/depths from landmark positions (used for loaded bundles)."""
    kin_v = gt.v
    R_wi = _dcm_unchecked(gt.q)
    R_wc = R_wi @ cfg.extrinsic.R
    centers = gt.p + R_wi @ cfg.extrinsic.translation
    angles, depths = [], []
    for j in tracks.frames():
        obs = tracks.observations_at(j)
        lm = np.array([gt.track_landmark[tid] for tid, _ in obs])
        pc = (gt.landmarks[lm] - centers[j]) @ R_wc[j]
        vc = R_wc[j].T @ kin_v[j]
        sp = np.linalg.norm(vc)
        axis = vc / sp if sp > 1e-9 else np.array([0.0, 0.0, 1.0])
        ang = np.arccos(np.clip(pc @ axis / np.linalg.norm(pc, axis=1), -1, 1))
        angles.append(ang)
        depths.append(pc[:, 2])
    return np.concatenate(angles), np.concatenate(depths)


def degrade_imu(stream: ImuStream, noise: ImuNoiseSpec, seed) -> ImuStream:
    """Add i.i.d. Gaussian white noise; the input stream is left untouched."""
    return add_white_noise(stream, noise, seed)


# --------------------------------------------------------------------------
# bundles


def _write_table(path: Path, header: list[str], data: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def _read_table(path: Path, header: list[str]) -> np.ndarray:
    if not path.exists():
        raise DataFormatError(f"missing bundle file: {path}")
    with open(path) as fh:
        first = fh.readline().strip().split(",")
        if first != header:
            raise DataFormatError(f"{path}: expected header {','.join(header)}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows).reshape(-1, len(header))


def write_bundle(sc: Scenario, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = sc.ground_truth
    _write_table(out / "ground_truth.csv", GT_HEADER, np.column_stack([gt.t, gt.p, gt.q, gt.v]))
    _write_table(out / "imu.csv", IMU_HEADER, np.column_stack([sc.imu.t, sc.imu.accel, sc.imu.gyro]))
    write_tracks_csv(sc.tracks, out / "tracks.csv")
    meta = {
        "scenario": sc.config.to_dict(),
        "stats": sc.stats,
        "landmarks": gt.landmarks.tolist(),
        "landmark_far": gt.landmark_far.astype(int).tolist(),
        "track_landmark": [[k, v] for k, v in sorted(gt.track_landmark.items())],
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return out


def read_bundle(path) -> Scenario:
    d = Path(path)
    if not d.is_dir():
        raise DataFormatError(f"scenario bundle directory not found: {d}")
    for name in BUNDLE_FILES:
        if not (d / name).exists():
            raise DataFormatError(f"scenario bundle is missing {name}: {d / name}")
    with open(d / "meta.json") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{d / 'meta.json'}: {exc}") from exc
    cfg = ScenarioConfig.from_dict(meta["scenario"])
    g = _read_table(d / "ground_truth.csv", GT_HEADER)
    m = _read_table(d / "imu.csv", IMU_HEADER)
    tracks = read_tracks_csv(d / "tracks.csv")
    gt = GroundTruth(
        g[:, 0],
        g[:, 1:4],
        g[:, 4:8],
        g[:, 8:11],
        np.asarray(meta.get("landmarks", []), dtype=float).reshape(-1, 3),
        np.asarray(meta.get("landmark_far", []), dtype=bool),
        {int(k): int(v) for k, v in meta.get("track_landmark", [])},
    )
    return Scenario(cfg, gt, ImuStream(m[:, 0], m[:, 1:4], m[:, 4:7]), tracks, meta.get("stats", {}))


def write_csv_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
