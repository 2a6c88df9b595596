"""Measurement error functions and their analytic Jacobians.

Jacobians w.r.t. the IMU pose use the perturbation ordering (theta, dp);
Jacobians w.r.t. camera and object poses use right-perturbation twists
ordered (rho, theta).  Object-state Jacobians are laid out as
``(object twist 6 | delta_u 3 | delta_s 3*N_s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePlane, NonPositiveSemiAxis
from .lie import (
    P2,
    P3,
    Pose,
    circledcirc,
    dual_quadric,
    lift,
    odot,
    project,
    skew,
)


@dataclass(frozen=True)
class ObjectClass:
    """Category model: mean semantic landmarks and mean ellipsoid semi-axes."""

    semantic_id: int
    mean_landmarks: np.ndarray  # 3 x N_s, object frame
    mean_semiaxes: np.ndarray  # 3-vector

    def __post_init__(self):
        s = np.array(self.mean_landmarks, dtype=float)
        u = np.array(self.mean_semiaxes, dtype=float).reshape(3)
        if s.shape[0] != 3 or s.shape[1] < 3:
            raise ValueError("mean_landmarks must be 3 x N_s with N_s >= 3")
        if np.any(u <= 0):
            raise NonPositiveSemiAxis(f"mean semi-axes {u} must be positive")
        s.flags.writeable = False
        u.flags.writeable = False
        object.__setattr__(self, "mean_landmarks", s)
        object.__setattr__(self, "mean_semiaxes", u)

    @property
    def num_landmarks(self) -> int:
        return self.mean_landmarks.shape[1]


@dataclass(frozen=True)
class ObjectInstance:
    """Per-instance pose and deformations of the class mean shape."""

    pose: Pose
    delta_landmarks: np.ndarray  # 3 x N_s
    delta_semiaxes: np.ndarray  # 3-vector

    def __post_init__(self):
        ds = np.array(self.delta_landmarks, dtype=float)
        du = np.array(self.delta_semiaxes, dtype=float).reshape(3)
        ds.flags.writeable = False
        du.flags.writeable = False
        object.__setattr__(self, "delta_landmarks", ds)
        object.__setattr__(self, "delta_semiaxes", du)

    @staticmethod
    def rest(cls: ObjectClass, pose: Pose = None) -> "ObjectInstance":
        return ObjectInstance(
            pose if pose is not None else Pose.identity(),
            np.zeros((3, cls.num_landmarks)),
            np.zeros(3),
        )

    def landmarks(self, cls: ObjectClass):
        """Deformed semantic landmarks in the object frame, 3 x N_s."""
        return cls.mean_landmarks + self.delta_landmarks

    def semiaxes(self, cls: ObjectClass):
        return cls.mean_semiaxes + self.delta_semiaxes


@dataclass(frozen=True)
class PlaneInObjectFrame:
    """Plane ``normal . x = offset`` in the object frame."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class ResidualBlock:
    """Stacked residual with Jacobians over the filter state and a nuisance."""

    error: np.ndarray
    jac_state: np.ndarray
    jac_nuisance: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        rows = self.error.shape[0]
        if not (
            self.jac_state.shape[0] == rows
            and self.jac_nuisance.shape[0] == rows
            and self.noise_cov.shape == (rows, rows)
        ):
            raise ValueError("residual block row counts disagree")


def object_state_dim(cls: ObjectClass) -> int:
    return 6 + 3 + 3 * cls.num_landmarks


def normalize_bbox_line(line, interior_point=None):
    """Scale a line to unit normal; orient it negative on the box interior.

    The residual value is invariant to line scale and flips sign with the
    line, so this only pins down a reproducible representative.
    """
    line = np.asarray(line, dtype=float)
    n = np.linalg.norm(line[:2])
    if n < 1e-12:
        raise DegeneratePlane("bounding-box line has zero image-plane normal")
    line = line / n
    if interior_point is not None and line[:2] @ interior_point + line[2] > 0:
        line = -line
    return line


def _inverse_matrix(pose: Pose):
    rt = pose.rotation.T
    m = np.eye(4)
    m[:3, :3] = rt
    m[:3, 3] = -rt @ pose.translation
    return m


def _imu_chain(cam: Pose, extrinsics: Pose):
    """Camera-twist-from-IMU-perturbation chain evaluated at `cam`."""
    r_ic = extrinsics.rotation
    out = np.zeros((6, 6))
    out[:3, :3] = -r_ic.T @ skew(extrinsics.translation)
    out[:3, 3:] = cam.rotation.T
    out[3:, :3] = r_ic.T
    return out


def geometric_error(cam: Pose, extrinsics: Pose, landmark, z, depth_min=1e-3,
                    state_jac=True):
    """Reprojection error of a point landmark with its two Jacobians.

    Returns ``(error 2, jac_imu 2x6, jac_landmark 2x3)``.  ``cam`` is the
    camera pose in the world frame; ``extrinsics`` (IMU-to-camera) only
    enters the chain to the IMU pose perturbation.  With
    ``state_jac=False`` the IMU Jacobian is skipped (returned as None),
    which the nuisance-only optimizers use.

    Raises:
        NonPositiveDepth: landmark at or behind the camera; drop it.
    """
    cam_inv = _inverse_matrix(cam)
    s = cam_inv @ lift(landmark)
    z_pred, dpi = project(s, depth_min)
    error = z_pred - np.asarray(z, dtype=float)
    front = P2 @ dpi
    jac_landmark = front @ cam_inv[:, :3]
    jac_imu = None
    if state_jac:
        jac_imu = -(front @ odot(s)) @ _imu_chain(cam, extrinsics)
    return error, jac_imu, jac_landmark


def semantic_error(
    cam: Pose,
    extrinsics: Pose,
    cls: ObjectClass,
    inst: ObjectInstance,
    landmark_index: int,
    z,
    depth_min=1e-3,
    state_jac=True,
):
    """Reprojection error of one deformed semantic landmark.

    Returns ``(error 2, jac_imu 2x6, jac_obj 2x(6+3+3N_s))`` with the
    object columns ordered (object twist, delta_u == 0, delta_s of the
    observed landmark; other landmark columns zero).
    """
    m = lift(cls.mean_landmarks[:, landmark_index] + inst.delta_landmarks[:, landmark_index])
    cam_inv = _inverse_matrix(cam)
    cam_inv_obj = cam_inv @ inst.pose.matrix()
    q = cam_inv_obj @ m
    z_pred, dpi = project(q, depth_min)
    error = z_pred - np.asarray(z, dtype=float)

    front = P2 @ dpi
    jac_imu = None
    if state_jac:
        jac_imu = -(front @ odot(q)) @ _imu_chain(cam, extrinsics)

    jac_obj = np.zeros((2, object_state_dim(cls)))
    jac_obj[:, :6] = front @ cam_inv_obj @ odot(m)
    col = 9 + 3 * landmark_index
    jac_obj[:, col : col + 3] = front @ cam_inv_obj[:, :3]
    return error, jac_imu, jac_obj


def plane_from_bbox_line(cam: Pose, obj_pose: Pose, line) -> PlaneInObjectFrame:
    """Object-frame plane swept by back-projecting a bounding-box line."""
    b_full = obj_pose.matrix().T @ _inverse_matrix(cam).T @ P3.T @ np.asarray(line, dtype=float)
    normal = b_full[:3]
    if np.linalg.norm(normal) < 1e-12:
        raise DegeneratePlane("bounding-box line passes through the camera center")
    return PlaneInObjectFrame(normal, -float(b_full[3]))


def tangent_distance(plane: PlaneInObjectFrame, u_total) -> float:
    """Signed distance from a plane to the nearest parallel ellipsoid tangent.

    ``d = (sgn(offset) sqrt(n' U^2 n) - offset) / |n|`` with sgn(0) = +1.
    """
    u_total = np.asarray(u_total, dtype=float)
    if np.any(u_total <= 0):
        raise NonPositiveSemiAxis(f"semi-axes {u_total} must be positive")
    b = plane.normal
    nb = np.linalg.norm(b)
    if nb < 1e-12:
        raise DegeneratePlane("plane normal is numerically zero")
    sign = 1.0 if plane.offset >= 0 else -1.0
    return float((sign * np.sqrt(b @ (u_total**2 * b)) - plane.offset) / nb)


def _distance_jacobian_wrt_plane(b, b_h, u_total):
    """1x4 Jacobian of tangent_distance w.r.t. the homogeneous plane (b, -b_h)."""
    nb = np.linalg.norm(b)
    u2b = u_total**2 * b
    root = np.sqrt(b @ u2b)
    sign = 1.0 if b_h >= 0 else -1.0
    out = np.zeros((1, 4))
    out[0, :3] = (sign / (nb * root)) * (u2b - (b @ u2b) / nb**2 * b) + b_h * b / nb**3
    out[0, 3] = 1.0 / nb
    return out


def bbox_error(
    cam: Pose,
    extrinsics: Pose,
    cls: ObjectClass,
    inst: ObjectInstance,
    line,
    state_jac=True,
):
    """Tangent-distance error of one bounding-box line.

    Returns ``(error scalar, jac_imu 1x6, jac_obj 1x(6+3+3N_s))`` with the
    object columns ordered (object twist, delta_u, zeros for delta_s).
    """
    line = np.asarray(line, dtype=float)
    plane = plane_from_bbox_line(cam, inst.pose, line)
    u_total = inst.semiaxes(cls)
    error = tangent_distance(plane, u_total)

    b, b_h = plane.normal, plane.offset
    de_db = _distance_jacobian_wrt_plane(b, b_h, u_total)

    obj_t = inst.pose.matrix().T
    cam_inv_t = _inverse_matrix(cam).T
    p_line = P3.T @ line
    db_dobj = circledcirc(obj_t @ cam_inv_t @ p_line).T

    jac_imu = None
    if state_jac:
        db_dcam = -obj_t @ cam_inv_t @ circledcirc(p_line).T
        jac_imu = (de_db @ db_dcam) @ _imu_chain(cam, extrinsics)

    nb = np.linalg.norm(b)
    root = np.sqrt(b @ (u_total**2 * b))
    sign = 1.0 if b_h >= 0 else -1.0
    jac_obj = np.zeros((1, object_state_dim(cls)))
    jac_obj[0, :6] = de_db @ db_dobj
    jac_obj[0, 6:9] = sign * (u_total * b**2) / (nb * root)
    return float(error), jac_imu, jac_obj


def bbox_error_quadratic(cam: Pose, cls: ObjectClass, inst: ObjectInstance, line):
    """Quadratic-form line-to-dual-conic error, with Jacobians.

    Returns ``(error scalar, jac_cam 1x6, jac_obj 1x(6+3+3N_s))``; the
    camera Jacobian is w.r.t. the camera twist (chain it through the
    camera-from-IMU Jacobian when needed).
    """
    line = np.asarray(line, dtype=float)
    u_total = inst.semiaxes(cls)
    q_star = dual_quadric(u_total)
    cam_inv = _inverse_matrix(cam)
    obj = inst.pose.matrix()
    p_line = P3.T @ line

    b_full = obj.T @ cam_inv.T @ p_line
    error = float(b_full @ q_star @ b_full)

    head = 2.0 * (p_line.T @ (cam_inv @ obj) @ q_star)  # row 4-vector
    jac_cam = -(head @ obj.T @ cam_inv.T @ circledcirc(p_line).T).reshape(1, 6)
    jac_obj = np.zeros((1, object_state_dim(cls)))
    jac_obj[0, :6] = head @ circledcirc(b_full).T
    y = b_full[:3]
    jac_obj[0, 6:9] = 2.0 * u_total * y * y
    return error, jac_cam, jac_obj


def regularization_error(inst: ObjectInstance, num_landmarks: int):
    """Deformation penalty stacking delta_u and scaled delta_s columns.

    Returns ``(error (3+3N_s), jac_obj (3+3N_s)x(6+3+3N_s))``; the Jacobian
    is a constant selector (identity for delta_u, 1/sqrt(N_s) blocks for
    each delta_s column, zeros for the pose twist).
    """
    n_s = num_landmarks
    scale = 1.0 / np.sqrt(n_s)
    error = np.concatenate([inst.delta_semiaxes, scale * inst.delta_landmarks.T.ravel()])
    jac = np.zeros((3 + 3 * n_s, 6 + 3 + 3 * n_s))
    jac[0:3, 6:9] = np.eye(3)
    jac[3:, 9:] = scale * np.eye(3 * n_s)
    return error, jac


def zero_velocity_error(state, z, g):
    """Static-platform pseudo-measurement residual and 6x15 Jacobian.

    Rows are the bias-corrected angular rate and the gravity-compensated
    specific force; both should vanish when the platform is static.
    """
    r = state.rotation
    a = np.asarray(z.accel, dtype=float) - state.bias_accel
    error = np.concatenate([np.asarray(z.omega, dtype=float) - state.bias_gyro, r @ a + g])
    jac = np.zeros((6, 15))
    jac[3:6, 0:3] = -r @ skew(a)
    jac[0:3, 9:12] = -np.eye(3)
    jac[3:6, 12:15] = -r
    return error, jac
