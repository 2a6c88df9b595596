"""Closed-form EKF prediction for the IMU state and sliding window.

The filter error state is ordered ``(theta, v, p, b_g, b_a)`` for the IMU
block followed by one ``(theta, p)`` block per window pose, oldest first.
Mean and transition matrix are exact under the zero-order-hold assumption
that the inertial sample is constant over its interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CovarianceNotPSD
from .lie import (
    GRAVITY,
    Pose,
    hl_matrix,
    left_jacobian,
    orthogonality_drift,
    project_to_so3,
    skew,
    so3_exp,
)

IMU_DIM = 15
POSE_DIM = 6

# Slices into the IMU block of the error state.
THETA = slice(0, 3)
VEL = slice(3, 6)
POS = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)

# Angle (rad) of omega*dt below which the transition-matrix blocks with
# 1/|w|^2 and 1/|w|^4 factors switch to their series limits.
_PHI_SERIES_ANGLE = 1e-4


@dataclass(frozen=True)
class InertialSample:
    """One gyro/accel reading held constant over an interval of dt seconds."""

    omega: np.ndarray
    accel: np.ndarray
    dt: float

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float).reshape(3)
        accel = np.array(self.accel, dtype=float).reshape(3)
        omega.flags.writeable = False
        accel.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "accel", accel)
        if not 0.0 < self.dt <= 0.1:
            raise ValueError(f"sample dt {self.dt} outside (0, 0.1]")


@dataclass(frozen=True)
class ImuNoiseParams:
    """Square roots of the power spectral densities of the IMU noise.

    sigma_w: angular-rate white noise, rad/s/sqrt(Hz)
    sigma_a: acceleration white noise, m/s^2/sqrt(Hz)
    sigma_bg: gyro bias random walk, rad/s^2/sqrt(Hz)
    sigma_ba: accel bias random walk, m/s^3/sqrt(Hz)
    """

    sigma_w: float = 2e-3
    sigma_a: float = 2e-3
    sigma_bg: float = 1e-5
    sigma_ba: float = 1e-4

    def __post_init__(self):
        for name in ("sigma_w", "sigma_a", "sigma_bg", "sigma_ba"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def psd_matrix(self):
        """Continuous-time noise PSD in (theta, v, p, b_g, b_a) order."""
        return np.diag(
            np.concatenate(
                [
                    np.full(3, self.sigma_w**2),
                    np.full(3, self.sigma_a**2),
                    np.zeros(3),
                    np.full(3, self.sigma_bg**2),
                    np.full(3, self.sigma_ba**2),
                ]
            )
        )


@dataclass(frozen=True)
class ImuState:
    rotation: np.ndarray
    velocity: np.ndarray
    position: np.ndarray
    bias_gyro: np.ndarray
    bias_accel: np.ndarray

    def __post_init__(self):
        for name in ("rotation", "velocity", "position", "bias_gyro", "bias_accel"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @staticmethod
    def identity() -> "ImuState":
        z = np.zeros(3)
        return ImuState(np.eye(3), z, z, z, z)

    def pose(self) -> Pose:
        return Pose(self.rotation, self.position)


@dataclass(frozen=True)
class FilterState:
    """IMU state plus a fixed-size window of past IMU poses and joint covariance."""

    imu: ImuState
    window: tuple
    window_frames: tuple
    covariance: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    extrinsics: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float)
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)
        g = np.array(self.gravity, dtype=float)
        g.flags.writeable = False
        object.__setattr__(self, "gravity", g)
        object.__setattr__(self, "window", tuple(self.window))
        object.__setattr__(self, "window_frames", tuple(self.window_frames))
        n = IMU_DIM + POSE_DIM * len(self.window)
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} != ({n}, {n})")

    @property
    def window_size(self) -> int:
        return len(self.window)

    def dim(self) -> int:
        return IMU_DIM + POSE_DIM * len(self.window)

    def slot_of_frame(self, frame_index: int):
        """Window slot holding the pose of `frame_index`, or None."""
        try:
            return self.window_frames.index(frame_index)
        except ValueError:
            return None

    def slot_columns(self, slot: int) -> slice:
        start = IMU_DIM + POSE_DIM * slot
        return slice(start, start + POSE_DIM)


def initial_filter_state(
    imu: ImuState,
    window_size: int,
    imu_sigmas,
    gravity=GRAVITY,
    extrinsics: Pose = None,
) -> FilterState:
    """Filter state whose window is seeded with clones of the initial pose.

    `imu_sigmas` are the initial standard deviations (theta, v, p, b_g, b_a),
    each a scalar or 3-vector.  The window slots are exact clones, so their
    covariance is the corresponding (theta, p) block, fully correlated.
    """
    sig = []
    for s in imu_sigmas:
        sig.extend(np.broadcast_to(np.asarray(s, dtype=float), (3,)))
    cov_imu = np.diag(np.array(sig) ** 2)
    m = np.zeros((IMU_DIM + POSE_DIM * window_size, IMU_DIM))
    m[:IMU_DIM] = np.eye(IMU_DIM)
    b = _clone_rows()
    for k in range(window_size):
        m[IMU_DIM + POSE_DIM * k : IMU_DIM + POSE_DIM * (k + 1)] = b
    cov = m @ cov_imu @ m.T
    return FilterState(
        imu=imu,
        window=tuple(imu.pose() for _ in range(window_size)),
        window_frames=tuple(-1 for _ in range(window_size)),
        covariance=cov,
        gravity=gravity,
        extrinsics=extrinsics if extrinsics is not None else Pose.identity(),
    )


def propagate_mean(state: ImuState, z: InertialSample, g=GRAVITY) -> ImuState:
    """Exact integration of the nominal dynamics over one sample interval."""
    tau = z.dt
    w = z.omega - state.bias_gyro
    a = z.accel - state.bias_accel
    r = state.rotation
    rot = r @ so3_exp(tau * w)
    vel = state.velocity + g * tau + r @ left_jacobian(tau * w) @ a * tau
    pos = (
        state.position
        + state.velocity * tau
        + g * tau**2 / 2.0
        + r @ hl_matrix(tau * w) @ a * tau**2
    )
    return ImuState(rot, vel, pos, state.bias_gyro, state.bias_accel)


def _phi_vw_pw(r, w, a, t):
    """The two transition blocks with removable 1/|w| singularities."""
    wn = np.linalg.norm(w)
    ax = skew(a)
    wx = skew(w)
    if wn * t < _PHI_SERIES_ANGLE:
        # Two-term series in w of the exact integrals; the quadratic
        # remainder is O(t^2 (t|w|)^2 |a|), negligible below the switch.
        phi_vw = r @ (t**2 / 2.0 * ax + t**3 / 3.0 * wx @ ax - t**3 / 6.0 * ax @ wx)
        phi_pw = r @ (t**3 / 6.0 * ax + t**4 / 12.0 * wx @ ax - t**4 / 24.0 * ax @ wx)
        return phi_vw, phi_pw
    wn2 = wn * wn
    axis_proj = np.eye(3) + wx @ wx / wn2  # projector onto the rotation axis
    delta = so3_exp(t * w) @ (np.eye(3) - t * wx) - np.eye(3)
    jl_p = left_jacobian(t * w)
    jl_m = left_jacobian(-t * w)
    hl_p = hl_matrix(t * w)
    hl_m = hl_matrix(-t * w)
    w_at = np.outer(w, a) / wn2
    a_dot_w = float(a @ w) / wn2
    phi_vw = r @ (
        delta @ (ax / wn2) @ axis_proj
        + t * (w_at @ (jl_m - np.eye(3)) + a_dot_w * (jl_p - np.eye(3)))
    )
    phi_pw = r @ (
        (t * jl_p - wx @ delta / wn2 - t * np.eye(3)) @ (ax / wn2) @ axis_proj
        + t**2
        / 2.0
        * (w_at @ (2.0 * hl_m - np.eye(3)) + a_dot_w * (2.0 * hl_p - np.eye(3)))
    )
    return phi_vw, phi_pw


def transition_matrix(state: ImuState, z: InertialSample):
    """Closed-form 15x15 error-state transition matrix over one interval."""
    t = z.dt
    w = z.omega - state.bias_gyro
    a = z.accel - state.bias_accel
    r = state.rotation
    jl_p = left_jacobian(t * w)
    hl_p = hl_matrix(t * w)
    phi = np.eye(IMU_DIM)
    phi[THETA, THETA] = so3_exp(-t * w)
    phi[THETA, BG] = -t * left_jacobian(-t * w)
    phi[VEL, THETA] = -t * r @ skew(jl_p @ a)
    phi[VEL, BA] = -t * r @ jl_p
    phi[POS, THETA] = -(t**2) * r @ skew(hl_p @ a)
    phi[POS, VEL] = t * np.eye(3)
    phi[POS, BA] = -(t**2) * r @ hl_p
    phi[VEL, BG], phi[POS, BG] = _phi_vw_pw(r, w, a, t)
    return phi


def _clone_rows():
    """Rows copying (theta, p) of the IMU error into a new window slot."""
    b = np.zeros((POSE_DIM, IMU_DIM))
    b[0:3, THETA] = np.eye(3)
    b[3:6, POS] = np.eye(3)
    return b


def _check_psd(cov):
    # chol(cov + eps I) succeeds iff min eigenvalue > -eps (up to rounding).
    try:
        np.linalg.cholesky(cov + 1e-6 * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise CovarianceNotPSD("filter covariance min eigenvalue below -1e-6")


def propagate_covariance(
    fs: FilterState,
    z: InertialSample,
    noise: ImuNoiseParams,
    frame_index: int = -1,
    insert_propagated: bool = False,
) -> FilterState:
    """Propagate the joint covariance and shift the pose window.

    The newest window slot receives the prior pose (and, through the clone
    rows, the prior pose error); with ``insert_propagated`` the propagated
    pose is stored instead and the clone rows become the matching rows of
    the transition matrix.  The oldest slot is dropped.
    """
    w = fs.window_size
    n = fs.dim()
    phi = transition_matrix(fs.imu, z)
    if insert_propagated:
        clone = np.vstack([phi[THETA], phi[POS]])
        new_pose = propagate_mean(fs.imu, z, fs.gravity).pose()
    else:
        clone = _clone_rows()
        new_pose = fs.imu.pose()

    a = np.zeros((n, n))
    a[:IMU_DIM, :IMU_DIM] = phi
    # Kept slots: old slot k+1 moves to slot k.
    for k in range(w - 1):
        a[fs.slot_columns(k), fs.slot_columns(k + 1)] = np.eye(POSE_DIM)
    a[fs.slot_columns(w - 1), :IMU_DIM] = clone

    q = np.zeros((n, n))
    q[:IMU_DIM, :IMU_DIM] = noise.psd_matrix()
    cov = a @ (fs.covariance + z.dt * q) @ a.T
    cov = (cov + cov.T) / 2.0
    _check_psd(cov)
    return replace(
        fs,
        window=fs.window[1:] + (new_pose,),
        window_frames=fs.window_frames[1:] + (frame_index,),
        covariance=cov,
    )


def predict(
    fs: FilterState,
    z: InertialSample,
    noise: ImuNoiseParams,
    frame_index: int = -1,
    insert_propagated: bool = False,
) -> FilterState:
    """Mean and covariance propagation over one sample, atomically."""
    out = propagate_covariance(fs, z, noise, frame_index, insert_propagated)
    imu = propagate_mean(fs.imu, z, fs.gravity)
    if orthogonality_drift(imu.rotation) > 1e-7:
        imu = replace(imu, rotation=project_to_so3(imu.rotation))
    return replace(out, imu=imu)
