"""KITTI raw-format ingest: OXTS packets, timestamps, calibration, tracks.

Expected layout (the calibration files may also sit in the parent
directory, as in the official date folders)::

    <sequence>/oxts/timestamps.txt
    <sequence>/oxts/data/0000000000.txt ...
    <sequence>/calib_imu_to_velo.txt
    <sequence>/calib_velo_to_cam.txt
    <sequence>/calib_cam_to_cam.txt
    <sequence>/tracks.csv            (optional, frame,track_id,u,v)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .geometry import CameraIntrinsics, Quaternion, RigidPose, dcm_to_quat
from .imu import ImuStream
from .tracks import TrackSet, read_tracks_csv

log = logging.getLogger(__name__)

EARTH_RADIUS = 6378137.0  # m, as in the KITTI devkit
OXTS_FIELDS = (
    "lat lon alt roll pitch yaw vn ve vf vl vu ax ay az af al au wx wy wz wf wl wu "
    "pos_accuracy vel_accuracy navstat numsats posmode velmode orimode"
).split()
CALIB_FILES = ("calib_imu_to_velo.txt", "calib_velo_to_cam.txt", "calib_cam_to_cam.txt")
ROTATION_TOL = 1e-5


@dataclass(frozen=True)
class OxtsRecord:
    lat: float  # deg
    lon: float  # deg
    alt: float  # m
    roll: float  # rad
    pitch: float
    yaw: float
    vn: float  # m/s, north
    ve: float  # east
    vf: float  # forward (body)
    vl: float  # left
    vu: float  # up
    ax: float  # m/s^2, body, includes gravity reaction
    ay: float
    az: float
    wx: float  # rad/s, body
    wy: float
    wz: float

    @classmethod
    def parse(cls, line: str, where: str = "") -> "OxtsRecord":
        parts = line.split()
        if len(parts) != len(OXTS_FIELDS):
            raise DataFormatError(f"{where}: expected {len(OXTS_FIELDS)} OXTS fields, got {len(parts)}")
        try:
            vals = dict(zip(OXTS_FIELDS, map(float, parts)))
        except ValueError as exc:
            raise DataFormatError(f"{where}: {exc}") from exc
        return cls(**{k: vals[k] for k in cls.__dataclass_fields__})

    def to_line(self) -> str:
        vals = {k: 0.0 for k in OXTS_FIELDS}
        vals.update({k: getattr(self, k) for k in self.__dataclass_fields__})
        vals.update(af=self.ax, al=self.ay, au=self.az, wf=self.wx, wl=self.wy, wu=self.wz)
        vals.update(navstat=4, numsats=10, posmode=5, velmode=5, orimode=6)
        ints = {"navstat", "numsats", "posmode", "velmode", "orimode"}
        return " ".join(str(int(vals[k])) if k in ints else repr(float(vals[k])) for k in OXTS_FIELDS)

    @property
    def accel(self) -> np.ndarray:
        return np.array([self.ax, self.ay, self.az])

    @property
    def gyro(self) -> np.ndarray:
        return np.array([self.wx, self.wy, self.wz])


@dataclass(frozen=True)
class CalibrationSet:
    intrinsics: dict[str, CameraIntrinsics]
    imu_from_camera: RigidPose  # rectified camera 00

    @property
    def K(self) -> CameraIntrinsics:
        return self.intrinsics["00"]


@dataclass
class KittiSequence:
    path: Path
    timestamps: np.ndarray  # s, relative to the first packet
    start_time: str
    records: list[OxtsRecord]
    imu: ImuStream
    calibration: CalibrationSet
    p: np.ndarray  # (N, 3) world-from-IMU positions, local plane at frame 0
    q: np.ndarray  # (N, 4)
    v: np.ndarray  # (N, 3) world velocities

    def __len__(self) -> int:
        return len(self.timestamps)

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.p, axis=0), axis=1)))


# --------------------------------------------------------------------------
# timestamps and geodesy


def parse_timestamp(text: str) -> tuple[datetime, int]:
    """``YYYY-mm-dd HH:MM:SS.fffffffff`` -> (whole seconds, nanoseconds)."""
    text = text.strip()
    head, _, frac = text.partition(".")
    base = datetime.strptime(head, "%Y-%m-%d %H:%M:%S")
    if frac and not frac.isdigit():
        raise ValueError(f"bad fractional seconds {frac!r}")
    ns = int((frac + "000000000")[:9]) if frac else 0
    return base, ns


def read_timestamps(path) -> tuple[np.ndarray, str]:
    """Seconds relative to the first line; strictly increasing."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"missing timestamps file: {path}")
    lines = [ln for ln in path.read_text().splitlines()]
    out = []
    t0 = None
    first = ""
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            base, ns = parse_timestamp(line)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed timestamp: {exc}") from exc
        if t0 is None:
            t0, first = base, line.strip()
        t = (base - t0).total_seconds() + ns * 1e-9
        if out and t <= out[-1]:
            raise DataFormatError(f"{path}:{lineno}: timestamps not strictly increasing")
        out.append(t)
    # keep nanosecond precision of the first stamp out of the float offsets
    if out:
        _, ns0 = parse_timestamp(first)
        out = [t - ns0 * 1e-9 for t in out]
    return np.array(out), first


def latlon_to_mercator(lat, lon, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """KITTI devkit Mercator projection (degrees in, metres out)."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    mx = scale * lon * np.pi * EARTH_RADIUS / 180.0
    my = scale * EARTH_RADIUS * np.log(np.tan((90.0 + lat) * np.pi / 360.0))
    return mx, my


def mercator_to_latlon(mx, my, scale: float) -> tuple[np.ndarray, np.ndarray]:
    lon = np.asarray(mx, dtype=float) * 180.0 / (np.pi * EARTH_RADIUS * scale)
    lat = 360.0 / np.pi * np.arctan(np.exp(np.asarray(my, dtype=float) / (EARTH_RADIUS * scale))) - 90.0
    return lat, lon


def rotation_from_rpy(roll, pitch, yaw) -> np.ndarray:
    """``Rz(yaw) Ry(pitch) Rx(roll)``, batched."""
    r, p, y = (np.asarray(a, dtype=float) for a in (roll, pitch, yaw))
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    R = np.empty(r.shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def oxts_poses(records: list[OxtsRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, quaternions and world velocities in a local level frame.

    The Mercator scale and origin come from the first packet.  Orientation
    stays absolute (z up) so gravity is ``(0, 0, -g)`` in the same frame.
    """
    if not records:
        return np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3))
    lat = np.array([r.lat for r in records])
    lon = np.array([r.lon for r in records])
    alt = np.array([r.alt for r in records])
    scale = np.cos(np.deg2rad(lat[0]))
    mx, my = latlon_to_mercator(lat, lon, scale)
    p = np.column_stack([mx - mx[0], my - my[0], alt - alt[0]])
    R = rotation_from_rpy([r.roll for r in records], [r.pitch for r in records], [r.yaw for r in records])
    q = dcm_to_quat(R)
    body_v = np.array([[r.vf, r.vl, r.vu] for r in records])
    v = np.einsum("nij,nj->ni", R, body_v)
    return p, q, v


# --------------------------------------------------------------------------
# calibration


def read_calib_file(path) -> dict[str, np.ndarray]:
    """``key: v1 v2 ...`` lines; non-numeric values (e.g. calib_time) are skipped."""
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, val = line.partition(":")
        try:
            out[key.strip()] = np.array([float(x) for x in val.split()])
        except ValueError:
            continue
    return out


def _checked_rotation(vals: np.ndarray, where: str) -> np.ndarray:
    if vals.size != 9:
        raise DataFormatError(f"{where}: rotation needs 9 values, got {vals.size}")
    R = vals.reshape(3, 3)
    dev = np.abs(R @ R.T - np.eye(3)).max()
    if dev > ROTATION_TOL or np.linalg.det(R) < 0:
        raise DataFormatError(f"{where}: rotation is not orthonormal (deviation {dev:.2e})")
    # project onto SO(3) to remove the rounding of the printed values
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _find_calib(seq: Path, name: str) -> Path:
    for d in (seq, seq.parent):
        if (d / name).exists():
            return d / name
    raise DataFormatError(f"missing calibration file {name} (looked in {seq} and {seq.parent})")


def _rt(d: dict, where: str) -> np.ndarray:
    if "R" not in d or "T" not in d:
        raise DataFormatError(f"{where}: needs R and T entries")
    T = np.eye(4)
    T[:3, :3] = _checked_rotation(d["R"], where)
    if d["T"].size != 3:
        raise DataFormatError(f"{where}: T needs 3 values")
    T[:3, 3] = d["T"]
    return T


def load_calibration(seq_dir) -> CalibrationSet:
    seq = Path(seq_dir)
    f_iv, f_vc, f_cc = (_find_calib(seq, n) for n in CALIB_FILES)
    velo_from_imu = _rt(read_calib_file(f_iv), str(f_iv))
    cam_from_velo = _rt(read_calib_file(f_vc), str(f_vc))
    cc = read_calib_file(f_cc)
    if "R_rect_00" not in cc:
        raise DataFormatError(f"{f_cc}: missing R_rect_00")
    rect = np.eye(4)
    rect[:3, :3] = _checked_rotation(cc["R_rect_00"], f"{f_cc} R_rect_00")
    intr: dict[str, CameraIntrinsics] = {}
    for cam in ("00", "01", "02", "03"):
        P = cc.get(f"P_rect_{cam}")
        if P is None:
            continue
        if P.size != 12:
            raise DataFormatError(f"{f_cc}: P_rect_{cam} needs 12 values")
        P = P.reshape(3, 4)
        size = cc.get(f"S_rect_{cam}", np.array([1242.0, 375.0]))
        intr[cam] = CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], int(round(size[0])), int(round(size[1])))
    if "00" not in intr:
        raise DataFormatError(f"{f_cc}: missing P_rect_00")
    rectcam_from_imu = rect @ cam_from_velo @ velo_from_imu
    imu_from_cam = np.linalg.inv(rectcam_from_imu)
    R = imu_from_cam[:3, :3]
    pose = RigidPose(Quaternion.from_dcm(R), imu_from_cam[:3, 3], "imu", "camera")
    return CalibrationSet(intr, pose)


# --------------------------------------------------------------------------
# sequences


def read_oxts(seq_dir) -> list[OxtsRecord]:
    d = Path(seq_dir) / "oxts" / "data"
    if not d.is_dir():
        raise DataFormatError(f"missing OXTS data directory: {d}")
    files = sorted(d.glob("*.txt"))
    if not files:
        raise DataFormatError(f"no OXTS packets in {d}")
    recs = []
    for f in files:
        lines = [ln for ln in f.read_text().splitlines() if ln.strip()]
        if len(lines) != 1:
            raise DataFormatError(f"{f}: expected exactly one OXTS line, got {len(lines)}")
        recs.append(OxtsRecord.parse(lines[0], f"{f}:1"))
    return recs


def load_sequence(path) -> KittiSequence:
    """IMU stream, timestamps, calibration and OXTS ground truth of a raw sequence."""
    seq = Path(path)
    if not seq.is_dir():
        raise DataFormatError(f"KITTI sequence directory not found: {seq}")
    t, first = read_timestamps(seq / "oxts" / "timestamps.txt")
    recs = read_oxts(seq)
    if len(recs) != len(t):
        raise DataFormatError(f"{seq}: {len(recs)} OXTS packets but {len(t)} timestamps")
    calib = load_calibration(seq)
    p, q, v = oxts_poses(recs)
    imu = ImuStream(t, np.array([r.accel for r in recs]), np.array([r.gyro for r in recs]))
    return KittiSequence(seq, t, first, recs, imu, calib, p, q, v)


def load_tracks(path) -> TrackSet:
    """Feature tracks from a ``frame,track_id,u,v`` CSV (or a sequence dir holding tracks.csv)."""
    p = Path(path)
    if p.is_dir():
        p = p / "tracks.csv"
    return read_tracks_csv(p)


# --------------------------------------------------------------------------
# writing (fixtures and synthetic exports)


def format_timestamp(t0: datetime, seconds: float) -> str:
    whole, ns = divmod(int(round(seconds * 1e9)), 1_000_000_000)
    stamp = t0 + timedelta(seconds=whole)
    return f"{stamp:%Y-%m-%d %H:%M:%S}.{ns:09d}"


def write_sequence(out_dir, t, records: list[OxtsRecord], calibration_text: dict[str, str], start: datetime | None = None) -> Path:
    """Write a minimal raw-layout sequence (used to build test fixtures)."""
    out = Path(out_dir)
    (out / "oxts" / "data").mkdir(parents=True, exist_ok=True)
    start = start or datetime(2011, 9, 26, 13, 2, 25)
    with open(out / "oxts" / "timestamps.txt", "w") as fh:
        for ti in t:
            fh.write(format_timestamp(start, float(ti)) + "\n")
    for i, r in enumerate(records):
        (out / "oxts" / "data" / f"{i:010d}.txt").write_text(r.to_line() + "\n")
    for name, text in calibration_text.items():
        (out / name).write_text(text)
    return out


def calibration_text(imu_from_camera: RigidPose, K: CameraIntrinsics, velo_from_imu: np.ndarray | None = None) -> dict[str, str]:
    """Calibration files reproducing ``imu_from_camera`` through a velodyne frame."""
    T_vi = np.eye(4) if velo_from_imu is None else velo_from_imu
    T_ic = imu_from_camera.as_matrix()
    T_cv = np.linalg.inv(T_vi @ T_ic)

    def fmt(a):
        return " ".join(f"{x:.12e}" for x in np.ravel(a))

    P = np.hstack([K.K, np.zeros((3, 1))])
    return {
        "calib_imu_to_velo.txt": f"calib_time: 25-May-2012 16:47:16\nR: {fmt(T_vi[:3, :3])}\nT: {fmt(T_vi[:3, 3])}\n",
        "calib_velo_to_cam.txt": f"calib_time: 15-Mar-2012 11:37:16\nR: {fmt(T_cv[:3, :3])}\nT: {fmt(T_cv[:3, 3])}\n",
        "calib_cam_to_cam.txt": (
            "calib_time: 09-Jan-2012 13:57:47\n"
            f"S_rect_00: {K.width:.6e} {K.height:.6e}\n"
            f"R_rect_00: {fmt(np.eye(3))}\n"
            f"P_rect_00: {fmt(P)}\n"
        ),
    }


def records_from_trajectory(p, q, v, accel, gyro, lat0: float = 49.0, lon0: float = 8.4, alt0: float = 110.0) -> list[OxtsRecord]:
    """OXTS packets reproducing a local-plane trajectory (inverse of :func:`oxts_poses`)."""
    from .geometry import quat_to_dcm

    p = np.asarray(p, dtype=float)
    R = quat_to_dcm(np.asarray(q, dtype=float))
    scale = np.cos(np.deg2rad(lat0))
    mx0, my0 = latlon_to_mercator(lat0, lon0, scale)
    lat, lon = mercator_to_latlon(mx0 + p[:, 0], my0 + p[:, 1], scale)
    yaw = np.arctan2(R[:, 1, 0], R[:, 0, 0])
    pitch = -np.arcsin(np.clip(R[:, 2, 0], -1, 1))
    roll = np.arctan2(R[:, 2, 1], R[:, 2, 2])
    body_v = np.einsum("nji,nj->ni", R, np.asarray(v, dtype=float))
    recs = []
    for i in range(len(p)):
        recs.append(
            OxtsRecord(
                float(lat[i]), float(lon[i]), alt0 + float(p[i, 2]),
                float(roll[i]), float(pitch[i]), float(yaw[i]),
                float(v[i][1]), float(v[i][0]),
                float(body_v[i, 0]), float(body_v[i, 1]), float(body_v[i, 2]),
                float(accel[i][0]), float(accel[i][1]), float(accel[i][2]),
                float(gyro[i][0]), float(gyro[i][1]), float(gyro[i][2]),
            )
        )
    return recs
