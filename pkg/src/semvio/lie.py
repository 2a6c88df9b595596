"""Rotation/pose primitives and projective-geometry operators.

Conventions used throughout the package:

* Twists are ordered ``xi = (rho, theta)`` — translational part first.
* The IMU pose perturbation is the exception: it is ordered
  ``(theta, p)`` with the rotation applied on the right of the estimate
  and the translation added, i.e. ``R = R_hat @ exp(theta_x)``,
  ``p = p_hat + dp``.  See :func:`camera_from_imu_jacobian`.
* All image coordinates are normalized (unit focal length); camera
  intrinsics never appear in this module.

Every function here is pure and every type is an immutable value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, NonPositiveSemiAxis

# Angle below which Rodrigues coefficients switch to 4-term Taylor series.
SMALL_ANGLE = 1e-5

GRAVITY = np.array([0.0, 0.0, -9.81])
GRAVITY.flags.writeable = False

# Row selectors from homogeneous 4-vectors: P2 keeps the two image
# coordinates of a normalized point, P3 keeps the three coordinates used
# when back-projecting conics/lines to quadrics/planes.
P2 = np.hstack([np.eye(2), np.zeros((2, 2))])
P3 = np.hstack([np.eye(3), np.zeros((3, 1))])
P2.flags.writeable = False
P3.flags.writeable = False


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    """Inverse of :func:`skew`."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def lift(x):
    """Append a homogeneous 1 to a 3-vector or to the columns of 3xN."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.append(x, 1.0)
    return np.vstack([x, np.ones((1, x.shape[1]))])


# The coefficient helpers below avoid the catastrophic cancellation of the
# textbook forms (1-cos)/a^2, (a-sin)/a^3, (2(cos-1)+a^2)/(2a^4) near zero:
# half-angle identities where they remove the cancellation, coefficient-level
# series otherwise.  Series branches are sized so the absolute matrix error
# stays below 1e-13 on both sides of each switch.


def _coeff_one_minus_cos(a):
    """(1 - cos a) / a^2 via the half-angle identity."""
    if a < SMALL_ANGLE:
        return 0.5 - a * a / 24.0
    s = np.sin(a / 2.0)
    return 2.0 * s * s / (a * a)


def _coeff_a_minus_sin(a):
    """(a - sin a) / a^3; series branch keeps the H_L skew term accurate."""
    if a < 0.1:
        a2 = a * a
        return 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0 - a2 * a2 * a2 / 362880.0
    return (a - np.sin(a)) / (a * a * a)


def _coeff_hl_quadratic(a):
    """(2(cos a - 1) + a^2) / (2 a^4) without forming cos a - 1."""
    if a < SMALL_ANGLE:
        return 1.0 / 24.0 - a * a / 720.0
    s = np.sin(a / 2.0)
    a2 = a * a
    return (a2 - 4.0 * s * s) / (2.0 * a2 * a2)


def so3_exp(theta):
    """Exponential map of so(3) via the Rodrigues formula."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    tx = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + tx + tx @ tx / 2.0 + tx @ tx @ tx / 6.0
    return (
        np.eye(3)
        + (np.sin(angle) / angle) * tx
        + _coeff_one_minus_cos(angle) * (tx @ tx)
    )


def so3_log(r):
    """Rotation vector of a rotation matrix; angle in [0, pi]."""
    trace = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle < SMALL_ANGLE:
        return 0.5 * vee(r - r.T)
    if np.pi - angle < 1e-4:
        # sin(angle) ~ 0: the axis comes from the diagonal (largest element
        # avoids dividing by a vanishing component) and the angle from the
        # antisymmetric part, where arccos has lost all precision.
        d = np.diag(r)
        k = int(np.argmax(d))
        axis = np.zeros(3)
        axis[k] = np.sqrt(max((d[k] + 1.0) / 2.0, 0.0))
        i, j = [(1, 2), (0, 2), (0, 1)][k]
        axis[i] = r[i, k] / (2.0 * axis[k])
        axis[j] = r[j, k] / (2.0 * axis[k])
        axis /= np.linalg.norm(axis)
        v = 0.5 * vee(r - r.T)  # equals sin(angle) * axis
        if np.dot(axis, v) < 0.0:
            axis = -axis
        angle = np.pi - np.arcsin(np.clip(np.linalg.norm(v), 0.0, 1.0))
        return angle * axis
    return angle / (2.0 * np.sin(angle)) * vee(r - r.T)


def left_jacobian(omega):
    """Left Jacobian of SO(3): sum over n of omega_x^n / (n+1)!."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    wx = skew(omega)
    wx2 = wx @ wx
    if angle < SMALL_ANGLE:
        return np.eye(3) + wx / 2.0 + wx2 / 6.0 + wx2 @ wx / 24.0
    return (
        np.eye(3)
        + _coeff_one_minus_cos(angle) * wx
        + _coeff_a_minus_sin(angle) * wx2
    )


def hl_matrix(omega):
    """Second-order analogue of the left Jacobian: sum of omega_x^n / (n+2)!."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    wx = skew(omega)
    wx2 = wx @ wx
    if angle < SMALL_ANGLE:
        return np.eye(3) / 2.0 + wx / 6.0 + wx2 / 24.0 + wx2 @ wx / 120.0
    return (
        np.eye(3) / 2.0
        + _coeff_a_minus_sin(angle) * wx
        + _coeff_hl_quadratic(angle) * wx2
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: maps points from the local frame to the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform a 3-vector or the columns of a 3xN array."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return self.rotation @ points + self.translation[:, None]


def se3_exp(xi) -> Pose:
    """Exponential map of se(3) for a twist ordered (rho, theta)."""
    xi = np.asarray(xi, dtype=float)
    rho, theta = xi[:3], xi[3:]
    return Pose(so3_exp(theta), left_jacobian(theta) @ rho)


def se3_apply_right_perturbation(t: Pose, xi) -> Pose:
    """Right-perturbed pose ``t @ exp(xi)``."""
    return t.compose(se3_exp(xi))


def twist_matrix(xi):
    """4x4 matrix form of a twist ordered (rho, theta)."""
    xi = np.asarray(xi, dtype=float)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[3:])
    m[:3, 3] = xi[:3]
    return m


def odot(p):
    """4x6 operator with ``twist_matrix(xi) @ p == odot(p) @ xi``.

    Requires a homogeneous point, i.e. ``p[3] == 1``.
    """
    out = np.zeros((4, 6))
    out[:3, :3] = np.eye(3)
    out[:3, 3:] = -skew(p[:3])
    return out


def circledcirc(p):
    """6x4 operator with ``twist_matrix(xi).T @ p == circledcirc(p).T @ xi``.

    Valid for any homogeneous 4-vector (the last entry never enters).
    """
    out = np.zeros((6, 4))
    out[:3, 3] = p[:3]
    out[3:, :3] = -skew(p[:3])
    return out


def perspective_jacobian(s):
    """4x4 Jacobian of the perspective normalization ``s -> s / s[2]``."""
    d = np.eye(4) / s[2]
    d[:, 2] -= np.asarray(s, dtype=float) / s[2] ** 2
    return d


def project(p_cam, depth_min=1e-3):
    """Normalized image coordinates of a homogeneous camera-frame point.

    Returns ``(z, dpi)`` where ``z`` is the 2-vector ``P2 @ (p/p[2])`` and
    ``dpi`` is the 4x4 Jacobian of the normalization at ``p_cam``.

    Raises:
        NonPositiveDepth: if the point depth is at or below ``depth_min``;
            the caller must discard the measurement.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    if p_cam[2] <= depth_min:
        raise NonPositiveDepth(f"depth {p_cam[2]:.3g} <= {depth_min:.3g}")
    return p_cam[:2] / p_cam[2], perspective_jacobian(p_cam)


def dual_quadric(u_total):
    """Dual quadric diag(u^2, -1) of an origin-centered axis-aligned ellipsoid."""
    u_total = np.asarray(u_total, dtype=float)
    if np.any(u_total <= 0.0):
        raise NonPositiveSemiAxis(f"semi-axes {u_total} must be positive")
    return np.diag(np.append(u_total**2, -1.0))


def transform_dual_quadric(t: Pose, q):
    """Dual quadric expressed in the parent frame of ``t``: T Q T^T."""
    m = t.matrix()
    out = m @ q @ m.T
    return (out + out.T) / 2.0


def camera_from_imu_jacobian(imu_pose: Pose, extrinsics: Pose):
    """6x6 Jacobian of the camera twist w.r.t. the IMU pose perturbation.

    The IMU pose perturbation is ordered (theta, dp) with
    ``R = R_hat exp(theta_x)`` and ``p = p_hat + dp``; the camera twist is
    ordered (rho, theta) for the right perturbation ``T_C exp(xi_x)`` of
    ``T_C = T_I @ extrinsics``.
    """
    r_ic = extrinsics.rotation
    p_ic = extrinsics.translation
    cam_rot = imu_pose.rotation @ r_ic
    out = np.zeros((6, 6))
    out[:3, :3] = -r_ic.T @ skew(p_ic)
    out[:3, 3:] = cam_rot.T
    out[3:, :3] = r_ic.T
    return out


def project_to_so3(r):
    """Nearest rotation matrix in Frobenius norm (polar projection)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def orthogonality_drift(r):
    """Max-abs deviation of ``r.T @ r`` from the identity."""
    return float(np.max(np.abs(r.T @ r - np.eye(3))))
