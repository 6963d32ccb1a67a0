"""Command line entry point: simulate, run, eval, stats and mc.

Exit codes: 0 ok, 2 input/config error, 3 numerical failure,
4 too many failed Monte Carlo runs.  Set ``VIO_LOG_LEVEL`` (e.g. DEBUG) to
change log verbosity; logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .confidence import ConfidenceMode, street_statistics
from .errors import ConfigError, DataFormatError, InvalidInputError, NumericalFailureError
from .evaluation import (
    COMPARISON_HEADER,
    RunSpec,
    TrajectoryEstimate,
    kitti_errors,
    monte_carlo,
    read_trajectory,
    write_json,
    write_plot_data,
    write_trajectory,
)

log = logging.getLogger("confvio")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL_MC = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# config


def _strip_comments(obj):
    """Drop ``_``-prefixed keys, which the reference config uses for docs."""
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, list):
        return [_strip_comments(v) for v in obj]
    return obj


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {p} must hold a JSON object")
    unknown = set(k for k in cfg if not k.startswith("_")) - {"scenario", "vio", "modes", "segment_length"}
    if unknown:
        raise CliError(f"config {p}: unknown sections {sorted(unknown)}")
    return _strip_comments(cfg)


def _vio_config(cfg: dict, mode: str | None, extrinsic=None, intrinsics=None):
    from .vio import VioConfig

    d = dict(cfg.get("vio", {}))
    if mode is not None:
        d["mode"] = mode
    if extrinsic is not None:
        d["extrinsic"] = {"q": extrinsic.rotation.as_array().tolist(), "t": extrinsic.translation.tolist()}
    if intrinsics is not None:
        d["intrinsics"] = asdict(intrinsics)
    try:
        return VioConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid vio config: {exc}") from exc


# --------------------------------------------------------------------------
# inputs


def _is_bundle(p: Path) -> bool:
    return (p / "meta.json").exists()


def _is_kitti(p: Path) -> bool:
    return (p / "oxts").is_dir()


def _load_input(path):
    """Return (frame_times, imu, tracks, gt TrajectoryEstimate, v0, extrinsic, intrinsics, kind)."""
    from .kitti_io import load_sequence, load_tracks
    from .sim import read_bundle

    if path is None:
        raise CliError("--input is required")
    p = Path(path)
    if not p.exists():
        raise CliError(f"input not found: {p}")
    if _is_bundle(p):
        tracks_file = p / "tracks.csv"
        if not tracks_file.exists():
            raise CliError(f"missing tracks file: {tracks_file}")
        sc = read_bundle(p)
        gt = sc.ground_truth
        return gt.t, sc.imu, sc.tracks, TrajectoryEstimate(gt.t, gt.p, gt.q), gt.v[0], sc.config.extrinsic, sc.config.intrinsics, "scenario"
    if _is_kitti(p):
        tracks_file = p / "tracks.csv"
        if not tracks_file.exists():
            raise CliError(f"missing tracks file: {tracks_file}")
        seq = load_sequence(p)
        tracks = load_tracks(tracks_file)
        gt = TrajectoryEstimate(seq.timestamps, seq.p, seq.q)
        cal = seq.calibration
        return seq.timestamps, seq.imu, tracks, gt, seq.v[0], cal.imu_from_camera, cal.K, "kitti"
    raise CliError(f"{p} is neither a scenario bundle (meta.json) nor a KITTI raw sequence (oxts/)")


def _load_trajectory(path) -> TrajectoryEstimate:
    p = Path(path)
    if p.is_dir():
        if (p / "trajectory.csv").exists():
            return read_trajectory(p / "trajectory.csv")
        if _is_bundle(p) or _is_kitti(p):
            return _load_input(p)[3]
        raise CliError(f"no trajectory.csv, scenario bundle or KITTI sequence in {p}")
    return read_trajectory(p)


def _out_dir(path) -> Path:
    if path is None:
        raise CliError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    from .sim import ScenarioConfig, generate_scenario, write_bundle

    cfg = load_config(args.config)
    scen = dict(cfg.get("scenario", {}))
    if args.seed is not None:
        scen["seed"] = args.seed
    sc_cfg = ScenarioConfig.from_dict(scen)
    sc = generate_scenario(sc_cfg)
    out = write_bundle(sc, _out_dir(args.out))
    log.info("wrote scenario bundle to %s (%d frames)", out, sc_cfg.n_frames)
    print(json.dumps({"out": str(out), **sc.stats}, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    from .vio import initial_state, run_sequence

    cfg = load_config(args.config)
    t, imu, tracks, gt, v0, extrinsic, intrinsics, kind = _load_input(args.input)
    vcfg = _vio_config(cfg, args.mode, extrinsic, intrinsics)
    init = initial_state(vcfg, gt.p[0], gt.q[0], v0)
    seed = 0 if args.seed is None else args.seed
    try:
        res = run_sequence(vcfg, init, t, imu, tracks, seed=seed)
    except NumericalFailureError as exc:
        raise CliError(f"numerical failure: {exc}", EXIT_NUMERICAL) from exc
    out = _out_dir(args.out)
    est = TrajectoryEstimate(res.t, res.p, res.q)
    write_trajectory(out / "trajectory.csv", est)
    write_json(
        out / "diagnostics.json",
        {
            "mode": vcfg.mode.value,
            "input": str(args.input),
            "input_kind": kind,
            "seed": seed,
            "n_frames": len(res.t),
            "config": vcfg.to_dict(),
            "frames": [d.to_dict() for d in res.diagnostics],
        },
    )
    write_plot_data(out / "plot_data", est, gt, res.diagnostics)
    log.info("wrote %s", out / "trajectory.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.input is None or args.gt is None:
        raise CliError("eval needs --input (trajectory) and --gt (ground truth)")
    est = _load_trajectory(args.input)
    gt = _load_trajectory(args.gt)
    seg = args.segment_len or cfg.get("segment_length", 100.0)
    lengths = (100, 200, 300, 400, 500, 600, 700, 800) if args.all_lengths else seg
    try:
        err = kitti_errors(est, gt, lengths)
    except InvalidInputError as exc:
        raise CliError(str(exc)) from exc
    out = _out_dir(args.out)
    write_json(out / "errors.json", err.to_dict())
    print(json.dumps({"rotation_error_1e-2_deg_per_m": err.rotation, "translation_error_percent": err.translation}))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .sim import observation_geometry, read_bundle

    if args.input is None:
        raise CliError("--input is required")
    p = Path(args.input)
    if p.is_dir() and _is_bundle(p):
        angles, depths = observation_geometry(read_bundle(p))
    elif p.is_file():
        angles, depths = _read_angle_depth(p)
    else:
        raise CliError(f"stats needs a scenario bundle or an angle,depth CSV: {p}")
    st = street_statistics(angles, depths)
    out = _out_dir(args.out)
    st.to_csv(out / "street_histogram.csv")
    write_json(out / "street_stats.json", st.summary())
    print(json.dumps(st.summary(), sort_keys=True))
    return EXIT_OK


def _read_angle_depth(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["angle", "depth"]:
            raise CliError(f"{path}: expected header angle,depth")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise CliError(f"{path}:{lineno}: {exc}") from exc
    a = np.array(rows).reshape(-1, 2)
    return a[:, 0], a[:, 1]


def cmd_mc(args) -> int:
    cfg = load_config(args.config)
    modes = tuple(cfg.get("modes", ("off", "literal", "inverted")))
    if args.mode is not None:
        modes = tuple(dict.fromkeys(("off", args.mode)))
    for m in modes:
        ConfidenceMode(m)
    spec = RunSpec(
        scenario=cfg.get("scenario", {}),
        vio=cfg.get("vio", {}),
        modes=modes,
        segment_length=args.segment_len or cfg.get("segment_length", 100.0),
    )
    n = args.runs or 10
    base = 0 if args.seed is None else args.seed
    workers = args.workers or min(n, os.cpu_count() or 1)
    res = monte_carlo(spec, n, list(range(base, base + n)), workers=workers)
    out = _out_dir(args.out)
    write_json(out / "mc_results.json", res.to_dict())
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_HEADER)
        w.writerows(res.comparison_rows())
    for row in res.comparison_rows():
        print(",".join("" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v)) for v in row))
    if res.too_many_failures:
        log.error("%.0f%% of runs failed", 100 * res.failure_fraction)
        return EXIT_PARTIAL_MC
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="confvio", description="Trifocal UKF visual-inertial odometry with feature confidence")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, inp=True):
        p.add_argument("--config", help="JSON config (scenario / vio sections)")
        if inp:
            p.add_argument("--input", help="scenario bundle, KITTI raw sequence, or file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        return p

    common(sub.add_parser("simulate", help="generate a synthetic scenario bundle"), inp=False)
    p = common(sub.add_parser("run", help="run the filter on a bundle or KITTI sequence"))
    p.add_argument("--mode", choices=[m.value for m in ConfidenceMode])
    p = common(sub.add_parser("eval", help="KITTI-style segment errors"))
    p.add_argument("--gt", help="ground truth: trajectory.csv, bundle or KITTI sequence")
    p.add_argument("--segment-len", type=float, default=None)
    p.add_argument("--all-lengths", action="store_true", help="use the full 100..800 m length set")
    common(sub.add_parser("stats", help="depth vs angle statistics"))
    p = common(sub.add_parser("mc", help="paired Monte Carlo over confidence modes"), inp=False)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--mode", choices=[m.value for m in ConfidenceMode], help="compare only this mode to the baseline")
    p.add_argument("--segment-len", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    return ap


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "stats": cmd_stats, "mc": cmd_mc}


def main(argv=None) -> int:
    level = os.environ.get("VIO_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalFailureError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataFormatError, InvalidInputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
