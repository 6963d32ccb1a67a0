"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from confvio.geometry import CameraIntrinsics, Quaternion, RigidPose, camera_matrix, trifocal_from_projections

FIXTURES = Path(__file__).parent / "fixtures"
KITTI_FIXTURE = FIXTURES / "kitti_raw" / "2011_09_26" / "2011_09_26_drive_0001_sync"


def rodrigues(rotvec) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (textbook formula)."""
    rotvec = np.asarray(rotvec, dtype=float)
    th = np.linalg.norm(rotvec)
    if th == 0.0:
        return np.eye(3)
    k = rotvec / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx


def pinhole(K: np.ndarray, R_wc: np.ndarray, c: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Pixel of world point(s) X for a camera at ``c`` with orientation ``R_wc``."""
    xc = (np.atleast_2d(X) - c) @ R_wc
    uvw = xc @ K.T
    return uvw[:, :2] / uvw[:, 2:3]


@dataclass
class Rig:
    K: CameraIntrinsics
    R: list  # world_from_camera rotations, views 1..3
    c: list  # camera centres, views 1..3
    X: np.ndarray  # world points
    uv: list  # pixels in views 1..3, each (N, 2)


def random_rig(rng: np.random.Generator, n_points: int = 20, baseline: float = 1.0) -> Rig:
    """Three cameras moving roughly forward, points well in front of all of them."""
    K = CameraIntrinsics(rng.uniform(400, 900), rng.uniform(400, 900), rng.uniform(300, 700), rng.uniform(150, 400))
    R, c = [], []
    for i in range(3):
        R.append(rodrigues(rng.normal(scale=0.1, size=3)))
        c.append(np.array([0.0, 0.0, -baseline * i]) + rng.normal(scale=0.3 * baseline, size=3))
    X = np.column_stack(
        [rng.uniform(-8, 8, n_points), rng.uniform(-4, 4, n_points), rng.uniform(6, 60, n_points)]
    )
    uv = [pinhole(K.K, R[i], c[i], X) for i in range(3)]
    return Rig(K, R, c, X, uv)


def perpendicular_line(K: CameraIntrinsics, R2, c2, c3, uv2: np.ndarray) -> np.ndarray:
    """Line through ``uv2`` perpendicular to its epipolar line (w.r.t. view 3)."""
    e2 = pinhole(K.K, R2, c2, c3)[0]
    n = uv2 - e2
    n = n / np.linalg.norm(n)
    return np.array([n[0], n[1], -n @ uv2])


def rig_tensor(rig: Rig):
    """Trifocal tensor of a rig, built from its three camera matrices."""
    P = [camera_matrix(RigidPose(Quaternion.from_dcm(rig.R[i]), rig.c[i], "world", "camera")) for i in range(3)]
    return trifocal_from_projections(*P)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def kitti_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics.kitti_like()


# --------------------------------------------------------------------------
# acceptance report: one line per criterion, repeated in the terminal summary

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(name: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
