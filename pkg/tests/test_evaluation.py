import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confvio import evaluation
from confvio.errors import DataFormatError, InvalidInputError, NumericalFailureError
from confvio.evaluation import (
    MonteCarloResult,
    RunRecord,
    RunSpec,
    TrajectoryEstimate,
    kitti_errors,
    monte_carlo,
    path_distances,
    read_trajectory,
    write_trajectory,
)
from confvio.geometry import quat_from_axis_angle


def straight_line(n=301, step=1.0, yaw_per_m=0.0):
    """Level drive along x; optionally yawing by ``yaw_per_m`` rad per metre."""
    s = np.arange(n) * step
    p = np.column_stack([s, np.zeros(n), np.zeros(n)])
    q = np.array([quat_from_axis_angle([0, 0, 1], yaw_per_m * si) for si in s])
    return TrajectoryEstimate(s / 10.0, p, q)


def wiggly(n=400, seed=0):
    rng = np.random.default_rng(seed)
    heading = np.cumsum(rng.normal(scale=0.02, size=n))
    p = np.cumsum(np.column_stack([np.cos(heading), np.sin(heading), 0.01 * rng.normal(size=n)]), axis=0)
    q = np.array([quat_from_axis_angle([0, 0, 1], h) for h in heading])
    return TrajectoryEstimate(np.arange(n) * 0.1, p, q)


def test_identical_trajectories_have_zero_error():
    gt = wiggly()
    err = kitti_errors(gt, gt, 100.0)
    assert not err.empty
    assert err.rotation == pytest.approx(0.0, abs=1e-9)
    assert err.translation == pytest.approx(0.0, abs=1e-9)


def test_one_percent_scale_error():
    gt = straight_line()
    est = TrajectoryEstimate(gt.t, 1.01 * gt.p, gt.q)
    err = kitti_errors(est, gt, 100.0)
    assert err.translation == pytest.approx(1.0, abs=0.01)
    assert err.rotation == pytest.approx(0.0, abs=1e-9)


def test_yaw_drift_of_a_hundredth_degree_per_metre():
    gt = straight_line()
    est = straight_line(yaw_per_m=np.deg2rad(0.01))
    err = kitti_errors(est, gt, 100.0)
    assert err.rotation == pytest.approx(1.0, rel=0.02)


def test_short_trajectory_gives_empty_result(caplog):
    gt = straight_line(n=50)
    err = kitti_errors(gt, gt, 100.0)
    assert err.empty and err.rotation is None and err.translation is None
    assert "shorter than" in err.diagnostic
    assert "shorter than" in caplog.text


def test_segment_count_and_lengths():
    gt = straight_line(n=301)
    err = kitti_errors(gt, gt, (100, 200))
    assert len(err.segments) == 201 + 101
    assert {s.length for s in err.segments} == {100.0, 200.0}


def test_length_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        kitti_errors(straight_line(10), straight_line(11))


def test_bad_pose_array_rejected():
    with pytest.raises(InvalidInputError):
        kitti_errors(np.zeros((3, 3, 3)), np.zeros((3, 3, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-50, 50))
def test_common_world_transform_does_not_change_errors(seed, yaw, shift):
    gt = wiggly(250, seed)
    rng = np.random.default_rng(seed + 1)
    est = TrajectoryEstimate(gt.t, gt.p + np.cumsum(0.01 * rng.normal(size=gt.p.shape), axis=0), gt.q)
    a = kitti_errors(est, gt, 100.0)

    T = np.eye(4)
    T[:3, :3] = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1]])
    T[:3, 3] = [shift, -shift, 1.0]
    b = kitti_errors(T @ est.matrices(), T @ gt.matrices(), 100.0)
    assert b.translation == pytest.approx(a.translation, rel=1e-9, abs=1e-12)
    assert b.rotation == pytest.approx(a.rotation, rel=1e-9, abs=1e-12)


def test_path_distances():
    np.testing.assert_allclose(path_distances(np.array([[0, 0, 0], [3, 4, 0], [3, 4, 2]])), [0, 5, 7])


def test_trajectory_csv_roundtrip(tmp_path):
    est = wiggly(30)
    write_trajectory(tmp_path / "t.csv", est)
    back = read_trajectory(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.p, est.p)
    np.testing.assert_array_equal(back.q, est.q)
    np.testing.assert_array_equal(back.t, est.t)


def test_trajectory_csv_errors(tmp_path):
    with pytest.raises(DataFormatError, match="not found"):
        read_trajectory(tmp_path / "missing.csv")
    p = tmp_path / "bad.csv"
    p.write_text("frame,t,px,py,pz,qw,qx,qy,qz\n0,0,0,0,0,1,0,0,0\n1,0.1,0,0\n")
    with pytest.raises(DataFormatError, match=":3:"):
        read_trajectory(p)


# --------------------------------------------------------------------------
# Monte Carlo


SHORT_SPEC = RunSpec(scenario={"kind": "straight", "duration": 11.0}, segment_length=100.0)


@pytest.fixture(scope="module")
def single_run():
    return monte_carlo(SHORT_SPEC, n_runs=1, seeds=[5])


def test_single_run_aggregate(single_run):
    agg = single_run.aggregate()
    assert set(agg) == {"off", "literal", "inverted"}
    for m in agg.values():
        assert m["translation"]["n"] == 1
        assert m["translation"]["std"] == 0.0
        assert m["translation"]["mean"] == m["translation"]["median"] > 0
        assert m["failed"] == 0
    assert single_run.failure_fraction == 0.0


def test_single_run_is_reproducible(single_run):
    again = monte_carlo(SHORT_SPEC, n_runs=1, seeds=[5])
    strip = lambda rs: [(r.seed, r.mode, r.rotation, r.translation) for r in rs]  # noqa: E731
    assert strip(again.records) == strip(single_run.records)


def test_comparison_rows(single_run):
    rows = single_run.comparison_rows()
    assert [r[0] for r in rows] == ["off", "literal", "inverted"]
    assert rows[0][5] == "" and rows[1][6] == 1


def test_failures_are_recorded(monkeypatch):
    def boom(*a, **k):
        raise NumericalFailureError("covariance not positive definite at frame 3")

    monkeypatch.setattr("confvio.vio.run_sequence", boom)
    res = monte_carlo(RunSpec(scenario={"duration": 1.0}, modes=("off", "inverted")), n_runs=2)
    assert all(r.failed for r in res.records)
    assert "frame 3" in res.records[0].error
    assert res.too_many_failures
    assert res.aggregate()["off"]["translation"]["n"] == 0


def test_paired_counts_strict_improvements():
    recs = [
        RunRecord(0, "off", 1.0, 2.0),
        RunRecord(0, "inverted", 1.0, 1.5),
        RunRecord(1, "off", 1.0, 2.0),
        RunRecord(1, "inverted", 1.0, 2.0),
        RunRecord(2, "off", None, None, failed=True),
        RunRecord(2, "inverted", 1.0, 1.0),
    ]
    pr = MonteCarloResult(recs, ("off", "inverted")).paired("inverted")
    assert pr["n_pairs"] == 2 and pr["n_improved"] == 1
    assert pr["pairs"][0]["translation_delta"] == pytest.approx(-0.5)


@pytest.mark.parametrize("kw", [dict(n_runs=0), dict(n_runs=2, seeds=[1]), dict(n_runs=2, seeds=[3, 3])])
def test_monte_carlo_argument_checks(kw):
    with pytest.raises(InvalidInputError):
        monte_carlo(SHORT_SPEC, **kw)


def test_run_spec_pickles():
    import pickle

    assert pickle.loads(pickle.dumps(SHORT_SPEC)) == SHORT_SPEC
    assert evaluation.MAX_FAILURE_FRACTION == 0.2
