"""Sliding-window EKF update step and track-lifecycle orchestration.

The update pipeline per closed track: optimize the nuisance (landmark or
object) over its observations, stack residuals and Jacobians, project onto
the left null space of the nuisance Jacobian, then fold every surviving
track of the frame into one joint (optionally QR-compressed) EKF update.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .backend import (
    ObjectObservation,
    Track,
    init_object_pose_ellipsoid,
    init_object_pose_keypoints,
    object_residual_stack,
    optimize_landmark,
    optimize_object,
    triangulate_landmark,
)
from .config import RunConfig
from .errors import (
    InnovationGateFailed,
    NoNullspace,
    NonMonotonicTimestamp,
    SemvioError,
)
from .lie import Pose, camera_from_imu_jacobian, so3_exp
from .propagation import (
    IMU_DIM,
    FilterState,
    ImuState,
    InertialSample,
    initial_filter_state,
    predict,
)
from .residuals import (
    ObjectClass,
    ObjectInstance,
    bbox_error,
    bbox_error_quadratic,
    geometric_error,
    semantic_error,
    zero_velocity_error,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackedUpdate:
    """Projected residual stack over the full filter error state."""

    e_hat: np.ndarray
    jac: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        rows = self.e_hat.shape[0]
        if self.jac.shape[0] != rows or self.noise_cov.shape != (rows, rows):
            raise ValueError("stacked update row counts disagree")


@dataclass(frozen=True)
class ObjectFrameMeasurement:
    """One object detection inside a frame, with ground-truth association id."""

    instance_id: int
    class_id: int
    keypoints: tuple  # ((landmark_index, 2-vector), ...)
    lines: tuple  # up to 4 homogeneous lines


@dataclass(frozen=True)
class MeasurementFrame:
    """Per-frame bundle: inertial sample plus camera measurements."""

    t: float
    imu: InertialSample | None
    keypoints: tuple = ()  # ((track_id, 2-vector), ...)
    objects: tuple = ()  # (ObjectFrameMeasurement, ...)


@dataclass
class TrackClosed:
    t: float
    track_id: int
    kind: str
    frames: int
    rows: int
    nullspace_residual: float
    reason: str  # "lost" | "evicted" | "dropped:<why>"

    def to_dict(self):
        return {"type": "track_closed", **self.__dict__}


@dataclass
class ObjectMapped:
    t: float
    object_id: int
    class_id: int
    rotation: list
    position: list
    semiaxes: list
    lm_converged: bool
    lm_cost: float
    pose_sigma: list

    def to_dict(self):
        return {"type": "object_mapped", **self.__dict__}


@dataclass
class Zupt:
    t: float
    velocity_before: float
    velocity_after: float

    def to_dict(self):
        return {"type": "zupt", **self.__dict__}


def stack_track_residuals(track: Track, fs: FilterState, y_hat, cls: ObjectClass = None,
                          v_geom=1.0, v_sem=1.0, v_bbox=1.0, use_quadratic_bbox=False):
    """Residuals of one track stacked over the window poses.

    Returns ``(e, jac_state, jac_nuisance, noise_cov, n_frames)``.  State
    Jacobian columns land at the window slots of the observed frames;
    observations whose frames fell out of the window are dropped.
    """
    extr = fs.extrinsics
    rows_e, rows_jx, rows_jy, variances = [], [], [], []
    n = fs.dim()
    used_frames = 0
    for frame, obs in track.observations:
        slot = fs.slot_of_frame(frame)
        if slot is None:
            logger.debug("track %s: frame %d out of window, dropped", track.track_id, frame)
            continue
        cam = fs.window[slot].compose(extr)
        cols = fs.slot_columns(slot)
        if track.kind == "geometric":
            e, j_imu, j_l = geometric_error(cam, extr, y_hat, obs)
            jx = np.zeros((2, n))
            jx[:, cols] = j_imu
            rows_e.append(e)
            rows_jx.append(jx)
            rows_jy.append(j_l)
            variances.extend([v_geom, v_geom])
        else:
            for l_idx, z in obs.keypoints:
                e, j_imu, j_o = semantic_error(cam, extr, cls, y_hat, l_idx, z)
                jx = np.zeros((2, n))
                jx[:, cols] = j_imu
                rows_e.append(e)
                rows_jx.append(jx)
                rows_jy.append(j_o)
                variances.extend([v_sem, v_sem])
            for line in obs.lines:
                if use_quadratic_bbox:
                    e, j_cam, j_o = bbox_error_quadratic(cam, cls, y_hat, line)
                    imu_pose = cam.compose(extr.inverse())
                    j_imu = j_cam @ camera_from_imu_jacobian(imu_pose, extr)
                else:
                    e, j_imu, j_o = bbox_error(cam, extr, cls, y_hat, line)
                jx = np.zeros((1, n))
                jx[:, cols] = j_imu
                rows_e.append(np.atleast_1d(e))
                rows_jx.append(jx)
                rows_jy.append(j_o)
                variances.append(v_bbox)
        used_frames += 1
    if not rows_e:
        raise NoNullspace("no usable observations left in the window")
    e = np.concatenate(rows_e)
    return (
        e,
        np.vstack(rows_jx),
        np.vstack(rows_jy),
        np.diag(variances),
        used_frames,
    )


def _left_nullspace_basis(jac_nuisance):
    basis = scipy.linalg.null_space(jac_nuisance.T)
    if basis.shape[1] == 0:
        raise NoNullspace(
            f"{jac_nuisance.shape[0]} rows do not exceed the nuisance rank"
        )
    return basis


def nullspace_project(e, jac_state, jac_nuisance, noise_cov):
    """Eliminate the nuisance by projecting onto its left null space.

    Returns ``(e', jac', noise')`` with the row count reduced by the rank
    of ``jac_nuisance``.

    Raises:
        NoNullspace: no rows survive the projection; discard the track.
    """
    basis = _left_nullspace_basis(jac_nuisance)
    return basis.T @ e, basis.T @ jac_state, basis.T @ noise_cov @ basis


def qr_compress(e, jac, noise_cov):
    """Compress a tall stacked system to `cols` rows without changing the update.

    The system is whitened first so the discarded rows carry unit noise and
    a zero Jacobian; square or wide systems pass through unchanged.
    """
    rows, cols = jac.shape
    if rows <= cols:
        return e, jac, noise_cov
    diag = np.diag(noise_cov)
    if np.count_nonzero(noise_cov - np.diag(diag)) == 0:
        w = 1.0 / np.sqrt(diag)
        jw = w[:, None] * jac
        ew = w * e
    else:
        chol = np.linalg.cholesky(noise_cov)
        jw = scipy.linalg.solve_triangular(chol, jac, lower=True)
        ew = scipy.linalg.solve_triangular(chol, e, lower=True)
    q1, r1 = np.linalg.qr(jw)
    return q1.T @ ew, r1, np.eye(cols)


def ekf_update(fs: FilterState, upd: StackedUpdate, gate_confidence=None) -> FilterState:
    """Joseph-form EKF update; the mean is retracted on-manifold.

    Raises:
        InnovationGateFailed: optional chi-square gate rejected the stack.
    """
    cov = fs.covariance
    j = upd.jac
    s = j @ cov @ j.T + upd.noise_cov
    s = (s + s.T) / 2.0
    if gate_confidence is not None:
        gamma = float(upd.e_hat @ np.linalg.solve(s, upd.e_hat))
        if gamma > chi2.ppf(gate_confidence, upd.e_hat.shape[0]):
            raise InnovationGateFailed(f"gate statistic {gamma:.2f}")
    gain = np.linalg.solve(s, j @ cov).T
    delta = -gain @ upd.e_hat
    i_kj = np.eye(fs.dim()) - gain @ j
    cov_new = i_kj @ cov @ i_kj.T + gain @ upd.noise_cov @ gain.T
    cov_new = (cov_new + cov_new.T) / 2.0

    imu = fs.imu
    imu_new = ImuState(
        rotation=imu.rotation @ so3_exp(delta[0:3]),
        velocity=imu.velocity + delta[3:6],
        position=imu.position + delta[6:9],
        bias_gyro=imu.bias_gyro + delta[9:12],
        bias_accel=imu.bias_accel + delta[12:15],
    )
    window_new = []
    for slot, pose in enumerate(fs.window):
        d = delta[fs.slot_columns(slot)]
        window_new.append(
            Pose(pose.rotation @ so3_exp(d[:3]), pose.translation + d[3:])
        )
    return replace(fs, imu=imu_new, window=tuple(window_new), covariance=cov_new)


def zupt_residual_stack(fs: FilterState, samples, sigma_gyro, sigma_accel):
    """Stacked zero-velocity pseudo-measurement from averaged samples."""
    omega = np.mean([s.omega for s in samples], axis=0)
    accel = np.mean([s.accel for s in samples], axis=0)
    mean_sample = InertialSample(omega, accel, samples[-1].dt)
    e, j_imu = zero_velocity_error(fs.imu, mean_sample, fs.gravity)
    jac = np.zeros((6, fs.dim()))
    jac[:, :IMU_DIM] = j_imu
    v = np.diag([sigma_gyro**2] * 3 + [sigma_accel**2] * 3)
    return StackedUpdate(e, jac, v)


def zero_velocity_update(fs: FilterState, samples, sigma_gyro, sigma_accel) -> FilterState:
    """EKF update with the 6-row static-platform residual."""
    return ekf_update(fs, zupt_residual_stack(fs, samples, sigma_gyro, sigma_accel))


class ZuptDetector:
    """Static-platform detector over a rolling window of raw IMU samples."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.samples = deque()

    def push(self, t, sample: InertialSample):
        self.samples.append((t, sample))
        horizon = t - self.cfg.window_seconds - 1e-9
        while self.samples and self.samples[0][0] < horizon:
            self.samples.popleft()

    def window_samples(self):
        return [s for _, s in self.samples]

    def is_static(self, velocity_norm: float) -> bool:
        if len(self.samples) < self.cfg.min_samples:
            return False
        if velocity_norm >= self.cfg.velocity_max:
            return False
        accels = np.array([s.accel for _, s in self.samples])
        spread = np.max(np.linalg.norm(accels - accels.mean(axis=0), axis=1))
        if spread >= self.cfg.accel_deviation_max:
            return False
        gyros = np.array([s.omega for _, s in self.samples])
        return bool(np.max(np.linalg.norm(gyros, axis=1)) < self.cfg.gyro_norm_max)


@dataclass
class _ObjectTrackState:
    class_id: int
    observations: list = field(default_factory=list)  # [(frame, ObjectObservation)]


class Filter:
    """Single-owner estimator driving prediction, track upkeep, and updates."""

    def __init__(self, config: RunConfig, classes: dict, init_state: ImuState,
                 debug: bool = False):
        self.cfg = config
        self.classes = dict(classes)
        extr = Pose(np.array(config.extrinsics_rotation, dtype=float),
                    np.array(config.extrinsics_translation, dtype=float))
        init = init_state
        if config.init.perturb:
            rng = np.random.default_rng(config.init.seed)
            ic = config.init
            init = ImuState(
                rotation=init.rotation @ so3_exp(rng.normal(0, ic.sigma_theta, 3)),
                velocity=init.velocity + rng.normal(0, ic.sigma_vel, 3),
                position=init.position + rng.normal(0, ic.sigma_pos, 3),
                bias_gyro=init.bias_gyro + rng.normal(0, ic.sigma_bg, 3),
                bias_accel=init.bias_accel + rng.normal(0, ic.sigma_ba, 3),
            )
        self.state = initial_filter_state(
            init,
            window_size=config.window,
            imu_sigmas=config.init.sigmas(),
            gravity=np.array(config.gravity, dtype=float),
            extrinsics=extr,
        )
        self.zupt_detector = ZuptDetector(config.zupt)
        self.geo_tracks: dict = {}
        self.obj_tracks: dict = {}
        self.object_map: dict = {}
        self.frame_count = 0
        self.last_t = -np.inf
        self.debug = debug
        self.debug_records: list = []

    # -- ingestion ---------------------------------------------------------

    def ingest_imu(self, t: float, sample: InertialSample):
        """Feed one raw-rate IMU sample to the static-platform detector."""
        self.zupt_detector.push(t, sample)

    def process_frame(self, frame: MeasurementFrame):
        """Advance the filter by one camera frame; returns emitted events."""
        if frame.t <= self.last_t:
            raise NonMonotonicTimestamp(f"frame at t={frame.t} after t={self.last_t}")
        self.last_t = frame.t
        events = []
        k = self.frame_count
        if k > 0:
            if frame.imu is None:
                raise SemvioError(f"frame {k} is missing its inertial sample")
            self.state = predict(
                self.state,
                frame.imu,
                self.cfg.imu_noise,
                frame_index=k - 1,
                insert_propagated=self.cfg.window_insert_propagated,
            )
            if self.cfg.zupt.enabled and self.zupt_detector.is_static(
                float(np.linalg.norm(self.state.imu.velocity))
            ):
                v_before = float(np.linalg.norm(self.state.imu.velocity))
                self.state = zero_velocity_update(
                    self.state,
                    self.zupt_detector.window_samples(),
                    self.cfg.zupt.sigma_gyro,
                    self.cfg.zupt.sigma_accel,
                )
                events.append(
                    Zupt(frame.t, v_before, float(np.linalg.norm(self.state.imu.velocity)))
                )

        events.extend(self._close_due_tracks(frame, k))
        self._ingest_observations(frame, k)
        self.frame_count += 1
        return events

    # -- track lifecycle ---------------------------------------------------

    def _due_tracks(self, frame: MeasurementFrame, k: int):
        """Tracks to close now: lost this frame, or about to be evicted."""
        seen_geo = {tid for tid, _ in frame.keypoints}
        seen_obj = {m.instance_id for m in frame.objects}
        evict_frame = k - self.cfg.window
        due = []
        for tid, obs in self.geo_tracks.items():
            lost = tid not in seen_geo
            evicted = obs[0][0] <= evict_frame
            if lost or evicted:
                due.append(("geometric", tid, "lost" if lost else "evicted"))
        for tid, st in self.obj_tracks.items():
            lost = tid not in seen_obj
            evicted = st.observations[0][0] <= evict_frame
            if lost or evicted:
                due.append(("object", tid, "lost" if lost else "evicted"))
        return due

    def _cams_for(self, track: Track):
        cams = {}
        for f, _ in track.observations:
            slot = self.state.slot_of_frame(f)
            if slot is not None:
                cams[f] = self.state.window[slot].compose(self.state.extrinsics)
        return cams

    def _close_due_tracks(self, frame, k):
        events = []
        blocks = []
        for kind, tid, reason in self._due_tracks(frame, k):
            if kind == "geometric":
                obs = self.geo_tracks.pop(tid)
                event, block = self._close_geometric(frame.t, tid, obs, reason)
            else:
                st = self.obj_tracks.pop(tid)
                event, block = self._close_object(frame.t, tid, st, reason)
            events.extend(event)
            if block is not None:
                blocks.append(block)
        if blocks:
            e = np.concatenate([b[0] for b in blocks])
            jac = np.vstack([b[1] for b in blocks])
            noise = np.eye(e.shape[0])  # per-track whitening made it exact
            if self.debug:
                self.debug_records.append(
                    {"t": frame.t, "prior_cov": np.array(self.state.covariance),
                     "e": e, "jac": jac, "noise": noise}
                )
            ec, jc, vc = qr_compress(e, jac, noise)
            try:
                self.state = ekf_update(
                    self.state,
                    StackedUpdate(ec, jc, vc),
                    gate_confidence=self.cfg.chi2_confidence if self.cfg.chi2_gate else None,
                )
            except InnovationGateFailed as exc:
                logger.info("update rejected by innovation gate: %s", exc)
        return events

    def _close_geometric(self, t, tid, obs, reason):
        if len(obs) < self.cfg.min_track_frames:
            return [], None
        track = Track(track_id=tid, kind="geometric", observations=tuple(obs))
        cams = self._cams_for(track)
        usable = [(f, z) for f, z in track.observations if f in cams]
        if len(usable) < max(2, self.cfg.min_track_frames):
            return [], None
        try:
            point, _ = triangulate_landmark(
                [cams[f] for f, _ in usable], [z for _, z in usable]
            )
            point, _ = optimize_landmark(
                track, cams, point, self.cfg.lm, v_geom=self.cfg.v_geom,
            )
            e, jx, jy, v, n_frames = stack_track_residuals(
                track, self.state, point, v_geom=self.cfg.v_geom
            )
            ep, jp, resid = self._project_whitened(e, jx, jy, v)
        except SemvioError as exc:
            return (
                [TrackClosed(t, tid, "geometric", len(obs), 0, np.nan, f"dropped:{type(exc).__name__}")],
                None,
            )
        return (
            [TrackClosed(t, tid, "geometric", n_frames, ep.shape[0], resid, reason)],
            (ep, jp),
        )

    @staticmethod
    def _project_whitened(e, jx, jy, v):
        """Whiten by the (diagonal) noise, then eliminate the nuisance.

        Whitening first keeps the projected noise exactly identity, so the
        later joint stack never needs a dense Cholesky.  Returns
        ``(e', jac', max|N^T jac_nuisance|)``.
        """
        w = 1.0 / np.sqrt(np.diag(v))
        basis = _left_nullspace_basis(w[:, None] * jy)
        return (
            basis.T @ (w * e),
            basis.T @ (w[:, None] * jx),
            float(np.max(np.abs(basis.T @ (w[:, None] * jy)))),
        )

    def _object_initial_pose(self, track: Track, cams, cls: ObjectClass):
        try:
            return init_object_pose_keypoints(cams, track, cls)
        except SemvioError:
            pass
        planes = []
        for f, obs in track.observations:
            cam = cams.get(f)
            if cam is None:
                continue
            m_t = cam.inverse().matrix().T
            for line in obs.lines:
                planes.append(m_t @ np.append(line, 0.0))
        return init_object_pose_ellipsoid(planes, cls.mean_semiaxes)

    def _close_object(self, t, tid, st: _ObjectTrackState, reason):
        if len(st.observations) < self.cfg.min_object_frames:
            return [], None
        cls = self.classes[st.class_id]
        track = Track(
            track_id=tid, kind="object",
            observations=tuple(st.observations), class_id=st.class_id,
        )
        cams = self._cams_for(track)
        try:
            pose0 = self._object_initial_pose(track, cams, cls)
            inst, lm_res = optimize_object(
                track, cams, ObjectInstance.rest(cls, pose0), cls, self.cfg.lm,
                extrinsics=self.state.extrinsics,
                v_sem=self.cfg.v_sem, v_bbox=self.cfg.v_bbox,
                use_quadratic_bbox=self.cfg.use_quadratic_bbox,
            )
            e, jx, jy, v, n_frames = stack_track_residuals(
                track, self.state, inst, cls=cls,
                v_sem=self.cfg.v_sem, v_bbox=self.cfg.v_bbox,
                use_quadratic_bbox=self.cfg.use_quadratic_bbox,
            )
            ep, jp, resid = self._project_whitened(e, jx, jy, v)
        except SemvioError as exc:
            return (
                [TrackClosed(t, tid, "object", len(st.observations), 0, np.nan,
                             f"dropped:{type(exc).__name__}")],
                None,
            )
        pose_sigma = self._object_pose_sigma(track, cams, inst, cls)
        self.object_map[tid] = {
            "class_id": st.class_id,
            "instance": inst,
            "frames": n_frames,
            "lm_converged": lm_res.converged,
            "pose_sigma": pose_sigma,
        }
        events = [
            TrackClosed(t, tid, "object", n_frames, ep.shape[0], resid, reason),
            ObjectMapped(
                t, tid, st.class_id,
                inst.pose.rotation.tolist(), inst.pose.translation.tolist(),
                inst.semiaxes(cls).tolist(), lm_res.converged, lm_res.cost,
                pose_sigma,
            ),
        ]
        return events, (ep, jp)

    def _object_pose_sigma(self, track, cams, inst, cls):
        """Diagonal sigma of the object pose twist from the LM normal matrix."""
        e, j = object_residual_stack(
            track, cams, self.state.extrinsics, inst, cls, self.cfg.lm,
            self.cfg.v_sem, self.cfg.v_bbox, self.cfg.use_quadratic_bbox,
        )
        normal = j.T @ j
        try:
            cov = np.linalg.inv(normal)
            return np.sqrt(np.clip(np.diag(cov)[:6], 0.0, None)).tolist()
        except np.linalg.LinAlgError:
            return [float("nan")] * 6

    def _ingest_observations(self, frame: MeasurementFrame, k: int):
        for tid, z in frame.keypoints:
            self.geo_tracks.setdefault(tid, []).append((k, np.asarray(z, dtype=float)))
        for m in frame.objects:
            st = self.obj_tracks.setdefault(
                m.instance_id, _ObjectTrackState(class_id=m.class_id)
            )
            st.observations.append(
                (k, ObjectObservation(tuple(m.keypoints), tuple(m.lines)))
            )
