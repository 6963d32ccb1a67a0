"""Regenerate the 20-frame KITTI-layout fixture from a noiseless synthetic run.

    python3 tests/fixtures/make_kitti_fixture.py
"""

from pathlib import Path

import numpy as np

from confvio.imu import DEFAULT_GRAVITY, ImuNoiseSpec
from confvio.geometry import quat_to_dcm
from confvio.kitti_io import calibration_text, records_from_trajectory, write_sequence
from confvio.sim import ScenarioConfig, generate_scenario, kinematics
from confvio.tracks import write_tracks_csv

HERE = Path(__file__).parent
SEQ = HERE / "kitti_raw" / "2011_09_26" / "2011_09_26_drive_0001_sync"

# KITTI-like velodyne mounting: 0.81 m forward, 0.32 m left, 0.8 m up of the IMU
VELO_FROM_IMU = np.eye(4)
VELO_FROM_IMU[:3, 3] = [-0.81, 0.32, -0.80]


def main():
    cfg = ScenarioConfig(duration=1.9, pixel_noise=0.0, imu_noise=ImuNoiseSpec.zero(), camera_rate=10.0, imu_rate=10.0)
    sc = generate_scenario(cfg)
    gt = sc.ground_truth
    kin = kinematics(cfg, gt.t)
    R = quat_to_dcm(kin.q)
    accel = np.einsum("nji,nj->ni", R, kin.a - DEFAULT_GRAVITY)
    recs = records_from_trajectory(kin.p, kin.q, kin.v, accel, kin.omega)
    calib = calibration_text(cfg.extrinsic, cfg.intrinsics, VELO_FROM_IMU)
    date_dir = SEQ.parent
    date_dir.mkdir(parents=True, exist_ok=True)
    for name, text in calib.items():
        (date_dir / name).write_text(text)
    write_sequence(SEQ, gt.t, recs, {})
    write_tracks_csv(sc.tracks, SEQ / "tracks.csv")


if __name__ == "__main__":
    main()
