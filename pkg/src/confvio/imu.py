"""IMU mechanization, measurement synthesis and bias random walk."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geometry import _as_quat_array, quat_to_dcm

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.80665])

# low-cost IMU white noise used for the noise-injection experiments
LOW_COST_SIGMA_ACCEL = 0.25  # m/s^2
LOW_COST_SIGMA_GYRO_DEG = 0.26  # deg/s


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    accel: np.ndarray  # specific force a_m, m/s^2, IMU frame
    gyro: np.ndarray  # angular rate g_m, rad/s, IMU frame

    def __post_init__(self):
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuBias:
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        ba = np.asarray(self.accel_bias, dtype=float).reshape(3)
        bg = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        if not (np.all(np.isfinite(ba)) and np.all(np.isfinite(bg))):
            raise InvalidInputError("bias must be finite")
        object.__setattr__(self, "accel_bias", ba)
        object.__setattr__(self, "gyro_bias", bg)


@dataclass(frozen=True)
class ImuNoiseSpec:
    """White noise (per sample) and bias random-walk densities, SI units."""

    sigma_na: float = 0.0  # m/s^2
    sigma_ng: float = 0.0  # rad/s
    sigma_ba_walk: float = 1e-4  # m/s^2/sqrt(s)
    sigma_bg_walk: float = 1e-5  # rad/s/sqrt(s)

    def __post_init__(self):
        for name in ("sigma_na", "sigma_ng", "sigma_ba_walk", "sigma_bg_walk"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")

    @classmethod
    def low_cost(cls) -> "ImuNoiseSpec":
        return cls(sigma_na=LOW_COST_SIGMA_ACCEL, sigma_ng=np.deg2rad(LOW_COST_SIGMA_GYRO_DEG))

    @classmethod
    def zero(cls) -> "ImuNoiseSpec":
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "ImuNoiseSpec":
        """Parse a config block; ``sigma_ng_deg`` is accepted in deg/s."""
        d = dict(d)
        if "sigma_ng_deg" in d:
            d["sigma_ng"] = float(np.deg2rad(d.pop("sigma_ng_deg")))
        if "sigma_bg_walk_deg" in d:
            d["sigma_bg_walk"] = float(np.deg2rad(d.pop("sigma_bg_walk_deg")))
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {
            "sigma_na": self.sigma_na,
            "sigma_ng": self.sigma_ng,
            "sigma_ba_walk": self.sigma_ba_walk,
            "sigma_bg_walk": self.sigma_bg_walk,
        }

    @property
    def is_zero(self) -> bool:
        return self.sigma_na == 0 and self.sigma_ng == 0


@dataclass(frozen=True)
class ImuStream:
    """Column-oriented IMU samples with strictly increasing timestamps."""

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        a = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        g = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        if not (len(t) == len(a) == len(g)):
            raise InvalidInputError("IMU columns have different lengths")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise InvalidInputError("IMU timestamps must be strictly increasing")
        for arr in (t, a, g):
            arr.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "accel", a)
        object.__setattr__(self, "gyro", g)

    @classmethod
    def from_samples(cls, samples) -> "ImuStream":
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.timestamp for s in samples]),
            np.array([s.accel for s in samples]),
            np.array([s.gyro for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> ImuSample:
        return ImuSample(self.t[i], self.accel[i], self.gyro[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def window(self, t0: float, t1: float, tol: float = 1e-9) -> "ImuStream":
        """Samples with ``t0 - tol <= t <= t1 + tol``."""
        lo = np.searchsorted(self.t, t0 - tol, side="left")
        hi = np.searchsorted(self.t, t1 + tol, side="right")
        return ImuStream(self.t[lo:hi], self.accel[lo:hi], self.gyro[lo:hi])


def mechanize(q, sample: ImuSample, bias: ImuBias, gravity=DEFAULT_GRAVITY) -> tuple[np.ndarray, np.ndarray]:
    """World-frame acceleration and bias-corrected body rate.

    ``a_W = R(q) (a_m - b_a) + g_W`` and ``omega = g_m - b_g``.  White noise
    is not subtracted here; it is accounted for in the process covariance.
    """
    R = quat_to_dcm(q)
    world_accel = R @ (sample.accel - bias.accel_bias) + np.asarray(gravity, dtype=float)
    return world_accel, sample.gyro - bias.gyro_bias


def mechanize_batch(R: np.ndarray, accel: np.ndarray, accel_bias: np.ndarray, gravity=DEFAULT_GRAVITY) -> np.ndarray:
    """Vectorized world acceleration for rotations ``(..., 3, 3)``."""
    return np.einsum("...ij,...j->...i", R, accel - accel_bias) + gravity


def synthesize(
    true_world_accel,
    true_body_rate,
    q,
    bias: ImuBias | None = None,
    gravity=DEFAULT_GRAVITY,
    noise: ImuNoiseSpec | None = None,
    rng_seed=None,
    timestamp: float = 0.0,
) -> ImuSample:
    """Inverse of :func:`mechanize`: what an IMU at attitude ``q`` would read."""
    bias = bias or ImuBias()
    noise = noise or ImuNoiseSpec.zero()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    R = quat_to_dcm(q)
    a_m = R.T @ (np.asarray(true_world_accel, dtype=float) - gravity) + bias.accel_bias
    g_m = np.asarray(true_body_rate, dtype=float) + bias.gyro_bias
    a_m = a_m + noise.sigma_na * rng.standard_normal(3)
    g_m = g_m + noise.sigma_ng * rng.standard_normal(3)
    return ImuSample(timestamp, a_m, g_m)


def synthesize_stream(
    t: np.ndarray,
    world_accel: np.ndarray,
    body_rate: np.ndarray,
    quats: np.ndarray,
    bias: ImuBias | None = None,
    gravity=DEFAULT_GRAVITY,
) -> ImuStream:
    """Noise-free measurements for a whole trajectory (noise via ``degrade``)."""
    bias = bias or ImuBias()
    R = quat_to_dcm(_as_quat_array(quats))
    a_m = np.einsum("nji,nj->ni", R, world_accel - gravity) + bias.accel_bias
    g_m = body_rate + bias.gyro_bias
    return ImuStream(t, a_m, g_m)


def add_white_noise(stream: ImuStream, noise: ImuNoiseSpec, seed) -> ImuStream:
    """Return a copy of ``stream`` with i.i.d. per-axis Gaussian noise."""
    if noise.is_zero:
        return stream
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(stream)
    na = noise.sigma_na * rng.standard_normal((n, 3))
    ng = noise.sigma_ng * rng.standard_normal((n, 3))
    return ImuStream(stream.t, stream.accel + na, stream.gyro + ng)


def propagate_bias(bias: ImuBias, dt: float, walk: ImuNoiseSpec, rng: np.random.Generator | None = None) -> ImuBias:
    """Brownian bias model: identity mean, optional sampled diffusion."""
    if dt < 0:
        raise InvalidInputError("dt must be non-negative")
    if rng is None:
        return bias
    sa = walk.sigma_ba_walk * np.sqrt(dt)
    sg = walk.sigma_bg_walk * np.sqrt(dt)
    if sa == 0 and sg == 0:
        return bias
    return ImuBias(bias.accel_bias + sa * rng.standard_normal(3), bias.gyro_bias + sg * rng.standard_normal(3))

