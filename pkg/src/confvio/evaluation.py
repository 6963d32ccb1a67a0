"""KITTI-style trajectory errors, Monte Carlo aggregation and output writers."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericalFailureError, VioError
from .geometry import _dcm_unchecked, rotation_angle

log = logging.getLogger(__name__)

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
TRAJECTORY_HEADER = ["frame", "t", "px", "py", "pz", "qw", "qx", "qy", "qz"]
MAX_FAILURE_FRACTION = 0.2


@dataclass
class TrajectoryEstimate:
    """World-from-IMU poses, one per camera frame."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        if not (len(self.t) == len(self.p) == len(self.q)):
            raise InvalidInputError("trajectory columns have different lengths")

    def __len__(self) -> int:
        return len(self.t)

    def matrices(self) -> np.ndarray:
        """``(N, 4, 4)`` homogeneous poses."""
        T = np.tile(np.eye(4), (len(self), 1, 1))
        q = self.q / np.linalg.norm(self.q, axis=1, keepdims=True)
        T[:, :3, :3] = _dcm_unchecked(q)
        T[:, :3, 3] = self.p
        return T


@dataclass(frozen=True)
class SegmentError:
    first_frame: int
    length: float  # m
    rotation_error: float  # deg/m
    translation_error: float  # percent

    def __post_init__(self):
        if self.length <= 0:
            raise InvalidInputError("segment length must be positive")


@dataclass
class KittiErrors:
    rotation: float | None  # mean, 1e-2 deg/m
    translation: float | None  # mean, percent
    segments: list[SegmentError] = field(default_factory=list)
    diagnostic: str = ""

    @property
    def empty(self) -> bool:
        return not self.segments

    def to_dict(self) -> dict:
        return {
            "rotation_error_1e-2_deg_per_m": self.rotation,
            "translation_error_percent": self.translation,
            "n_segments": len(self.segments),
            "diagnostic": self.diagnostic,
            "segments": [asdict(s) for s in self.segments],
        }


def path_distances(p: np.ndarray) -> np.ndarray:
    """Cumulative distance travelled at each frame."""
    d = np.linalg.norm(np.diff(p, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(d)])


def _as_matrices(traj) -> np.ndarray:
    if isinstance(traj, TrajectoryEstimate):
        return traj.matrices()
    arr = np.asarray(traj, dtype=float)
    if arr.ndim != 3 or arr.shape[1:] != (4, 4):
        raise InvalidInputError("poses must be a TrajectoryEstimate or an (N, 4, 4) array")
    return arr


def kitti_errors(est, gt, segment_length: float | tuple = 100.0, step: int = 1) -> KittiErrors:
    """Mean segment errors in the KITTI odometry convention.

    For every start frame (every ``step`` frames) whose ground-truth path
    reaches ``segment_length`` metres further on, the relative-pose residual
    between the segment endpoints is ``inv(dE) @ dG``; its rotation angle and
    translation norm are divided by the segment length.  Rotation is reported
    in 1e-2 deg/m and translation in percent.
    """
    E = _as_matrices(est)
    G = _as_matrices(gt)
    if len(E) != len(G):
        raise InvalidInputError(f"estimate has {len(E)} poses, ground truth {len(G)}")
    lengths = (segment_length,) if np.isscalar(segment_length) else tuple(segment_length)
    dist = path_distances(G[:, :3, 3])
    segs: list[SegmentError] = []
    for first in range(0, len(G), step):
        for length in lengths:
            last = int(np.searchsorted(dist, dist[first] + length, side="left"))
            if last >= len(G):
                continue
            dG = np.linalg.solve(G[first], G[last])
            dE = np.linalg.solve(E[first], E[last])
            err = np.linalg.solve(dE, dG)
            r = rotation_angle(err[:3, :3])
            t = np.linalg.norm(err[:3, 3])
            segs.append(SegmentError(first, float(length), float(np.rad2deg(r) / length), float(100.0 * t / length)))
    if not segs:
        msg = f"trajectory length {dist[-1]:.1f} m is shorter than the {min(lengths)} m segment"
        log.warning(msg)
        return KittiErrors(None, None, [], msg)
    rot = 100.0 * float(np.mean([s.rotation_error for s in segs]))
    trans = float(np.mean([s.translation_error for s in segs]))
    return KittiErrors(rot, trans, segs)


# --------------------------------------------------------------------------
# writers


def write_trajectory(path, est: TrajectoryEstimate) -> None:
    with open(Path(path), "w", newline="") as fh:
        fh.write(",".join(TRAJECTORY_HEADER) + "\n")
        data = np.column_stack([np.arange(len(est)), est.t, est.p, est.q])
        np.savetxt(fh, data, delimiter=",", fmt=["%d"] + ["%.17g"] * 8)


def read_trajectory(path) -> TrajectoryEstimate:
    from .errors import DataFormatError

    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"trajectory file not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != TRAJECTORY_HEADER:
            raise DataFormatError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != len(TRAJECTORY_HEADER):
                raise DataFormatError(f"{path}:{lineno}: expected {len(TRAJECTORY_HEADER)} fields")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    a = np.array(rows).reshape(-1, len(TRAJECTORY_HEADER))
    return TrajectoryEstimate(a[:, 1], a[:, 2:5], a[:, 5:9])


def write_json(path, obj) -> None:
    with open(Path(path), "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_plot_data(out_dir, est: TrajectoryEstimate, gt: TrajectoryEstimate | None, diagnostics=()) -> None:
    """CSV series behind top-down path, tau and confidence plots."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "path_xy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        if gt is not None:
            w.writerow(["frame", "est_x", "est_y", "gt_x", "gt_y"])
            for i in range(len(est)):
                w.writerow([i, repr(est.p[i, 0]), repr(est.p[i, 1]), repr(gt.p[i, 0]), repr(gt.p[i, 1])])
        else:
            w.writerow(["frame", "est_x", "est_y"])
            for i in range(len(est)):
                w.writerow([i, repr(est.p[i, 0]), repr(est.p[i, 1])])
    with open(d / "tau.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "t", "tau"])
        for dg in diagnostics:
            w.writerow([dg.frame, repr(float(est.t[dg.frame])), "" if dg.tau is None else repr(dg.tau)])
    with open(d / "confidence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "t", "mean_confidence", "mean_weight", "n_inliers"])
        for dg in diagnostics:
            mc = "" if dg.mean_confidence is None else repr(dg.mean_confidence)
            mw = "" if dg.mean_weight is None else repr(dg.mean_weight)
            w.writerow([dg.frame, repr(float(est.t[dg.frame])), mc, mw, dg.n_inliers])


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass
class RunSpec:
    """Everything needed to reproduce one paired Monte Carlo experiment.

    ``scenario`` and ``vio`` are plain config dicts so a RunSpec pickles
    cheaply into worker processes; ``seed`` in ``scenario`` is overridden
    per run.
    """

    scenario: dict = field(default_factory=dict)
    vio: dict = field(default_factory=dict)
    modes: tuple[str, ...] = ("off", "literal", "inverted")
    segment_length: float = 100.0


@dataclass
class RunRecord:
    seed: int
    mode: str
    rotation: float | None
    translation: float | None
    failed: bool = False
    error: str = ""
    runtime: float = 0.0


def run_seed(spec: RunSpec, seed: int) -> list[RunRecord]:
    """Generate one scenario and run every mode on it (same noise realization)."""
    import time

    from .sim import ScenarioConfig, generate_scenario
    from .vio import VioConfig, initial_state, run_sequence

    sc = generate_scenario(ScenarioConfig.from_dict({**spec.scenario, "seed": seed}))
    gt = sc.ground_truth
    gt_traj = TrajectoryEstimate(gt.t, gt.p, gt.q)
    out = []
    for mode in spec.modes:
        t0 = time.perf_counter()
        try:
            vcfg = VioConfig.from_dict(
                {
                    **spec.vio,
                    "mode": mode,
                    "extrinsic": {
                        "q": sc.config.extrinsic.rotation.as_array().tolist(),
                        "t": sc.config.extrinsic.translation.tolist(),
                    },
                    "intrinsics": asdict(sc.config.intrinsics),
                }
            )
            init = initial_state(vcfg, gt.p[0], gt.q[0], gt.v[0])
            res = run_sequence(vcfg, init, gt.t, sc.imu, sc.tracks, seed=seed)
            err = kitti_errors(TrajectoryEstimate(res.t, res.p, res.q), gt_traj, spec.segment_length)
            if not np.all(np.isfinite(res.p)):
                raise NumericalFailureError("non-finite state")
            out.append(RunRecord(seed, mode, err.rotation, err.translation, runtime=time.perf_counter() - t0))
        except (NumericalFailureError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("seed %d mode %s failed: %s", seed, mode, exc)
            out.append(RunRecord(seed, mode, None, None, True, str(exc), time.perf_counter() - t0))
    return out


def _stats(values: list[float]) -> dict:
    if not values:
        return {"n": 0, "mean": None, "median": None, "std": None}
    a = np.asarray(values, dtype=float)
    return {"n": int(a.size), "mean": float(a.mean()), "median": float(np.median(a)), "std": float(a.std(ddof=0))}


@dataclass
class MonteCarloResult:
    records: list[RunRecord]
    modes: tuple[str, ...]
    baseline: str = "off"

    def by_mode(self, mode: str) -> list[RunRecord]:
        return [r for r in self.records if r.mode == mode]

    @property
    def failure_fraction(self) -> float:
        return sum(r.failed for r in self.records) / max(len(self.records), 1)

    @property
    def too_many_failures(self) -> bool:
        return self.failure_fraction > MAX_FAILURE_FRACTION

    def aggregate(self) -> dict:
        agg = {}
        for m in self.modes:
            ok = [r for r in self.by_mode(m) if not r.failed]
            agg[m] = {
                "rotation": _stats([r.rotation for r in ok if r.rotation is not None]),
                "translation": _stats([r.translation for r in ok if r.translation is not None]),
                "failed": sum(r.failed for r in self.by_mode(m)),
            }
        return agg

    def paired(self, mode: str) -> dict:
        """Per-seed translation/rotation deltas of ``mode`` against the baseline."""
        base = {r.seed: r for r in self.by_mode(self.baseline) if not r.failed}
        rows = []
        for r in self.by_mode(mode):
            b = base.get(r.seed)
            if r.failed or b is None or r.translation is None or b.translation is None:
                continue
            rows.append(
                {
                    "seed": r.seed,
                    "translation_delta": r.translation - b.translation,
                    "rotation_delta": r.rotation - b.rotation,
                }
            )
        improved = sum(row["translation_delta"] < 0 for row in rows)
        return {"mode": mode, "n_pairs": len(rows), "n_improved": improved, "pairs": rows}

    def to_dict(self) -> dict:
        return {
            "modes": list(self.modes),
            "baseline": self.baseline,
            "failure_fraction": self.failure_fraction,
            "runs": [asdict(r) for r in self.records],
            "aggregate": self.aggregate(),
            "paired": [self.paired(m) for m in self.modes if m != self.baseline],
        }

    def comparison_rows(self) -> list[list]:
        agg = self.aggregate()
        rows = []
        for m in self.modes:
            pr = self.paired(m) if m != self.baseline else None
            rows.append(
                [
                    m,
                    agg[m]["translation"]["median"],
                    agg[m]["translation"]["mean"],
                    agg[m]["rotation"]["median"],
                    agg[m]["rotation"]["mean"],
                    "" if pr is None else pr["n_improved"],
                    "" if pr is None else pr["n_pairs"],
                    agg[m]["failed"],
                ]
            )
        return rows


COMPARISON_HEADER = [
    "mode",
    "translation_median_pct",
    "translation_mean_pct",
    "rotation_median_1e-2deg_per_m",
    "rotation_mean_1e-2deg_per_m",
    "improved_vs_baseline",
    "pairs",
    "failed",
]


def _run_seed_safe(spec: RunSpec, seed: int) -> list[RunRecord]:
    try:
        return run_seed(spec, seed)
    except VioError as exc:
        return [RunRecord(seed, m, None, None, True, str(exc)) for m in spec.modes]


def monte_carlo(spec: RunSpec, n_runs: int = 10, seeds=None, workers: int = 1) -> MonteCarloResult:
    """Paired runs: every mode sees the same scenario and noise for a seed."""
    if n_runs < 1:
        raise InvalidInputError("n_runs must be >= 1")
    seeds = list(range(n_runs)) if seeds is None else [int(s) for s in seeds]
    if len(seeds) != n_runs:
        raise InvalidInputError(f"{len(seeds)} seeds given for {n_runs} runs")
    if len(set(seeds)) != len(seeds):
        raise InvalidInputError("Monte Carlo seeds must be distinct")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            batches = list(ex.map(_run_seed_safe, [spec] * n_runs, seeds))
    else:
        batches = [_run_seed_safe(spec, s) for s in seeds]
    records = [r for b in batches for r in b]
    baseline = "off" if "off" in spec.modes else spec.modes[0]
    return MonteCarloResult(records, tuple(spec.modes), baseline)
