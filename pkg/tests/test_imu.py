import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confvio.errors import InvalidInputError
from confvio.geometry import quat_from_axis_angle, quat_normalize, quat_to_dcm
from confvio.imu import (
    DEFAULT_GRAVITY,
    ImuBias,
    ImuNoiseSpec,
    ImuSample,
    ImuStream,
    add_white_noise,
    mechanize,
    propagate_bias,
    synthesize,
    synthesize_stream,
)

vec3 = arrays(np.float64, 3, elements=st.floats(-20, 20))


def test_stationary_level_imu_cancels_gravity():
    sample = ImuSample(0.0, -DEFAULT_GRAVITY, np.zeros(3))
    a_w, omega = mechanize([1, 0, 0, 0], sample, ImuBias())
    np.testing.assert_allclose(a_w, 0.0, atol=1e-15)
    np.testing.assert_array_equal(omega, 0.0)


def test_tilted_stationary_imu_cancels_gravity():
    q = quat_from_axis_angle([1, 1, 0], 0.4)
    a_m = -quat_to_dcm(q).T @ DEFAULT_GRAVITY
    a_w, _ = mechanize(q, ImuSample(0.0, a_m, np.zeros(3)), ImuBias())
    np.testing.assert_allclose(a_w, 0.0, atol=1e-14)


def test_bias_equal_to_reading_cancels():
    a = np.array([0.3, -1.2, 4.0])
    g = np.array([0.1, 0.0, -0.2])
    a_w, omega = mechanize([1, 0, 0, 0], ImuSample(0.0, a, g), ImuBias(a, g), gravity=np.zeros(3))
    np.testing.assert_array_equal(a_w, 0.0)
    np.testing.assert_array_equal(omega, 0.0)


def test_hovering_synthesis_is_minus_rotated_gravity():
    q = quat_normalize([0.9, 0.1, -0.3, 0.2])
    s = synthesize(np.zeros(3), np.zeros(3), q)
    np.testing.assert_allclose(s.accel, -quat_to_dcm(q).T @ DEFAULT_GRAVITY, atol=1e-15)
    np.testing.assert_array_equal(s.gyro, 0.0)


@given(vec3, vec3, arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1), vec3)
def test_synthesize_mechanize_roundtrip(a_true, w_true, q, ba):
    q = quat_normalize(q)
    bias = ImuBias(ba * 0.01, w_true * 0.001)
    s = synthesize(a_true, w_true, q, bias)
    a_w, omega = mechanize(q, s, bias)
    np.testing.assert_allclose(a_w, a_true, atol=1e-10)
    np.testing.assert_allclose(omega, w_true, atol=1e-10)


def test_same_seed_gives_identical_samples():
    noise = ImuNoiseSpec.low_cost()
    a = synthesize(np.ones(3), np.ones(3), [1, 0, 0, 0], noise=noise, rng_seed=7)
    b = synthesize(np.ones(3), np.ones(3), [1, 0, 0, 0], noise=noise, rng_seed=7)
    assert a.accel.tobytes() == b.accel.tobytes() and a.gyro.tobytes() == b.gyro.tobytes()


def test_low_cost_spec_values():
    spec = ImuNoiseSpec.low_cost()
    assert spec.sigma_na == 0.25
    assert spec.sigma_ng == pytest.approx(np.deg2rad(0.26))


@pytest.mark.parametrize("field", ["accel", "gyro"])
def test_injected_noise_std_within_band(field):
    n = 100_000
    stream = ImuStream(np.arange(n) * 0.01, np.zeros((n, 3)), np.zeros((n, 3)))
    spec = ImuNoiseSpec.low_cost()
    noisy = add_white_noise(stream, spec, seed=1)
    target = spec.sigma_na if field == "accel" else spec.sigma_ng
    std = getattr(noisy, field).std(axis=0)
    assert np.all(np.abs(std / target - 1.0) < 0.05)


def test_zero_noise_is_identity():
    stream = ImuStream([0.0, 0.1], np.ones((2, 3)), np.zeros((2, 3)))
    assert add_white_noise(stream, ImuNoiseSpec.zero(), seed=3) is stream


def test_synthesize_stream_matches_scalar_synthesis(rng):
    n = 50
    q = quat_normalize(rng.normal(size=(n, 4)))
    a = rng.normal(size=(n, 3))
    w = rng.normal(size=(n, 3))
    stream = synthesize_stream(np.arange(n) * 0.01, a, w, q)
    for k in (0, 17, 49):
        s = synthesize(a[k], w[k], q[k])
        np.testing.assert_allclose(stream.accel[k], s.accel, atol=1e-13)


# --------------------------------------------------------------------------
# bias random walk


def test_deterministic_bias_propagation_is_identity():
    b = ImuBias([0.1, 0.2, 0.3], [0.01, 0.0, 0.0])
    assert propagate_bias(b, 1.0, ImuNoiseSpec.low_cost()) is b


def test_zero_walk_leaves_bias_unchanged():
    b = ImuBias([0.1, 0.2, 0.3])
    out = propagate_bias(b, 1.0, ImuNoiseSpec.zero(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.accel_bias, b.accel_bias)


def test_walk_variance_follows_brownian_law():
    walk = ImuNoiseSpec(sigma_ba_walk=0.02, sigma_bg_walk=0.003)
    rng = np.random.default_rng(5)
    n_steps, dt, trials = 20, 0.05, 10_000
    finals = np.empty((trials, 6))
    for i in range(trials):
        b = ImuBias()
        for _ in range(n_steps):
            b = propagate_bias(b, dt, walk, rng)
        finals[i] = np.concatenate([b.accel_bias, b.gyro_bias])
    var = finals.var(axis=0)
    expected = n_steps * dt * np.array([walk.sigma_ba_walk**2] * 3 + [walk.sigma_bg_walk**2] * 3)
    assert np.all(np.abs(var / expected - 1.0) < 0.1)


def test_negative_dt_rejected():
    with pytest.raises(InvalidInputError):
        propagate_bias(ImuBias(), -1.0, ImuNoiseSpec())


# --------------------------------------------------------------------------
# stream container


def test_stream_requires_increasing_time():
    with pytest.raises(InvalidInputError):
        ImuStream([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))


def test_stream_window_is_inclusive():
    s = ImuStream(np.arange(10) * 0.1, np.zeros((10, 3)), np.zeros((10, 3)))
    w = s.window(0.2, 0.5)
    np.testing.assert_allclose(w.t, [0.2, 0.3, 0.4, 0.5])


def test_nonfinite_bias_rejected():
    with pytest.raises(InvalidInputError):
        ImuBias([np.nan, 0, 0])


def test_noise_spec_accepts_degrees():
    spec = ImuNoiseSpec.from_dict({"sigma_na": 0.25, "sigma_ng_deg": 0.26})
    assert spec.sigma_ng == pytest.approx(np.deg2rad(0.26))
