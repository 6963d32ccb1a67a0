"""Additive-noise unscented Kalman filter with confidence-scaled measurement noise.

The update uses the gain ``K_c = P_xy (P_yy + C_f R)^-1``, where ``C_f`` is a
block-diagonal matrix of per-feature scale factors.  With ``C_f = I`` this is
the ordinary UKF update.

Quaternion components that live inside the state vector are handled by
plain additive sigma points followed by renormalization of the mean; pass
their index slices as ``quat_blocks``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InvalidInputError, NumericalFailureError

log = logging.getLogger(__name__)

JITTER = 1e-12
CONFIDENCE_CAP = 1e12


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=float).reshape(-1)
        self.cov = np.array(self.cov, dtype=float)
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise InvalidInputError(f"covariance shape {self.cov.shape} does not match mean size {n}")

    @property
    def dim(self) -> int:
        return self.mean.size

    def copy(self) -> "GaussianState":
        return GaussianState(self.mean.copy(), self.cov.copy())


@dataclass(frozen=True)
class SigmaParams:
    """Scaled unscented transform parameters (alpha, beta, kappa)."""

    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def lam(self, n: int) -> float:
        return self.alpha**2 * (n + self.kappa) - n

    def weights(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        lam = self.lam(n)
        if n + lam <= 0:
            raise InvalidInputError("sigma parameters give non-positive spread n + lambda")
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1.0 - self.alpha**2 + self.beta)
        return wm, wc


@dataclass(frozen=True)
class ConfidenceMatrix:
    """``bl_diag(c_1 I_b, ..., c_M I_b)`` stored as its scale vector."""

    scales: np.ndarray
    block: int = 2

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=float).reshape(-1)
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise InvalidInputError("confidence scales must be finite and >= 0")
        object.__setattr__(self, "scales", s)

    @classmethod
    def identity(cls, n_blocks: int, block: int = 2) -> "ConfidenceMatrix":
        return cls(np.ones(n_blocks), block)

    @property
    def dim(self) -> int:
        return self.scales.size * self.block

    def diagonal(self) -> np.ndarray:
        return np.repeat(self.scales, self.block)

    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal())


@dataclass
class UpdateInfo:
    innovation: np.ndarray
    predicted_measurement: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _cholesky(P: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        log.debug("cholesky failed, retrying with jitter")
    try:
        return np.linalg.cholesky(symmetrize(P) + JITTER * np.eye(P.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("covariance not positive definite after jitter") from exc


def sigma_points(state: GaussianState, params: SigmaParams) -> np.ndarray:
    """``(2n+1, n)`` sigma points; row 0 is the mean."""
    n = state.dim
    L = _cholesky(state.cov)
    scale = np.sqrt(n + params.lam(n))
    spread = scale * L.T  # rows are scaled columns of L
    return np.vstack([state.mean, state.mean + spread, state.mean - spread])


def _weighted_mean(Y: np.ndarray, wm: np.ndarray) -> np.ndarray:
    # anchored at the central point: sum(wm) == 1 but wm[0] can be ~ -1e6
    return Y[0] + wm[1:] @ (Y[1:] - Y[0])


def _renormalize(x: np.ndarray, quat_blocks: Sequence[slice]) -> np.ndarray:
    for blk in quat_blocks:
        q = x[..., blk]
        x[..., blk] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return x


def _apply(fn: Callable, X: np.ndarray, vectorized: bool, *args) -> np.ndarray:
    if vectorized:
        return np.asarray(fn(X, *args), dtype=float)
    return np.array([np.asarray(fn(x, *args), dtype=float).reshape(-1) for x in X])


def ukf_predict(
    state: GaussianState,
    f: Callable,
    Q: np.ndarray,
    u=None,
    params: SigmaParams = SigmaParams(),
    quat_blocks: Sequence[slice] = (),
    vectorized: bool = False,
) -> GaussianState:
    """Unscented prediction ``x' = f(x, u) + w``, ``w ~ N(0, Q)``.

    ``f`` is called as ``f(x, u)``; with ``vectorized=True`` it receives all
    sigma points at once as a ``(2n+1, n)`` array.
    """
    X = sigma_points(state, params)
    wm, wc = params.weights(state.dim)
    Y = _apply(f, X, vectorized, u)
    mean = _weighted_mean(Y, wm)
    # spread about the raw weighted mean: the central covariance weight is
    # large and negative for small alpha, so renormalizing first would leak
    # the projection offset into the covariance
    D = Y - mean
    cov = (D.T * wc) @ D + Q
    mean = _renormalize(mean, quat_blocks)
    return GaussianState(mean, symmetrize(cov))


def ukf_update(
    state: GaussianState,
    h: Callable,
    z: np.ndarray,
    R: np.ndarray,
    C_f: ConfidenceMatrix | np.ndarray | None = None,
    params: SigmaParams = SigmaParams(),
    quat_blocks: Sequence[slice] = (),
    vectorized: bool = False,
    return_info: bool = False,
):
    """Confidence-weighted unscented update.

    ``K_c = P_xy (P_yy + C_f R)^-1``, ``x+ = x- + K_c (z - z_hat)`` and
    ``P+ = P- - K_c (P_yy + C_f R) K_c^T``.  ``C_f=None`` means identity.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    m = z.size
    R = np.asarray(R, dtype=float)
    if R.shape != (m, m):
        raise InvalidInputError(f"R shape {R.shape} does not match measurement size {m}")
    if C_f is None:
        CR = R
    else:
        diag = C_f.diagonal() if isinstance(C_f, ConfidenceMatrix) else None
        if diag is not None:
            if diag.size != m:
                raise InvalidInputError(f"confidence matrix dim {diag.size} != measurement size {m}")
            CR = np.minimum(diag, CONFIDENCE_CAP)[:, None] * R
        else:
            C = np.asarray(C_f, dtype=float)
            if C.shape != (m, m):
                raise InvalidInputError(f"confidence matrix shape {C.shape} != ({m}, {m})")
            CR = C @ R

    X = sigma_points(state, params)
    wm, wc = params.weights(state.dim)
    Z = _apply(h, X, vectorized)
    if Z.shape != (X.shape[0], m):
        raise InvalidInputError(f"measurement function returned shape {Z.shape}, expected {(X.shape[0], m)}")
    z_hat = _weighted_mean(Z, wm)
    dZ = Z - z_hat
    dX = X - state.mean
    Pyy = (dZ.T * wc) @ dZ
    Pxy = (dX.T * wc) @ dZ
    S = symmetrize(Pyy + CR)
    K = _solve_gain(Pxy, S)
    innovation = z - z_hat
    mean = state.mean + K @ innovation
    mean = _renormalize(mean, quat_blocks)
    cov = symmetrize(state.cov - K @ S @ K.T)
    post = GaussianState(mean, cov)
    if return_info:
        return post, UpdateInfo(innovation, z_hat, S, K)
    return post


def _solve_gain(Pxy: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``Pxy S^-1`` via Cholesky of S, with one jittered retry."""
    for attempt in range(2):
        try:
            c = cho_factor(S if attempt == 0 else S + JITTER * np.eye(S.shape[0]))
            # K = Pxy S^-1  <=>  S K^T = Pxy^T
            return cho_solve(c, Pxy.T).T
        except np.linalg.LinAlgError:
            continue
    raise NumericalFailureError("innovation covariance is singular")
