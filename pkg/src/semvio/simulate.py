"""Synthetic ground truth and measurement generation.

Analytic trajectories provide exact body angular rate and world
acceleration, so closed-form propagation is exact on them wherever the
true inputs are constant over a sample interval (circles, static
segments).  Measurements are forward models of the estimator's residuals
with ground-truth association ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .lie import GRAVITY, Pose, dual_quadric, transform_dual_quadric
from .msckf import MeasurementFrame, ObjectFrameMeasurement
from .propagation import ImuNoiseParams, ImuState, InertialSample
from .residuals import ObjectClass, ObjectInstance, normalize_bbox_line


@dataclass(frozen=True)
class TruthState:
    rotation: np.ndarray
    velocity: np.ndarray
    position: np.ndarray
    omega_body: np.ndarray
    accel_world: np.ndarray


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circle"  # circle | lissajous | stop_and_go
    duration: float = 60.0
    imu_rate: float = 200.0
    cam_rate: float = 20.0
    # circle
    radius: float = 5.0
    angular_rate: float = 0.4  # rad/s around the circle
    height: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    # lissajous (fixed attitude)
    amplitudes: tuple = (2.0, 1.5, 0.5)
    frequencies: tuple = (0.1, 0.13, 0.07)  # Hz
    phase: float = 1.2
    # stop_and_go (straight line along +x, camera looking +y)
    static_time: float = 10.0
    move_time: float = 4.0
    move_distance: float = 6.0

    def __post_init__(self):
        if self.duration <= 0 or self.imu_rate <= 0 or self.cam_rate <= 0:
            raise ConfigError("trajectory duration and rates must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("imu_rate must be an integer multiple of cam_rate")


def _look_rotation(forward, up_hint=(0.0, 0.0, 1.0)):
    """Rotation whose camera z axis points along `forward` (x right, y down)."""
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    up = np.asarray(up_hint, dtype=float)
    if abs(z @ up) > 0.95:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(z, x), z])


def _rz(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Trajectory:
    """Analytic trajectory; `at(t)` returns the full kinematic truth."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        if spec.kind == "circle":
            # Body frame fixed relative to the orbit: camera axis points at
            # the circle center throughout.
            self._r0 = _look_rotation([-1.0, 0.0, 0.0])
        elif spec.kind == "lissajous":
            self._r0 = _look_rotation([1.0, 0.0, 0.0])
        elif spec.kind == "stop_and_go":
            self._r0 = _look_rotation([0.0, 1.0, 0.0])
        else:
            raise ConfigError(f"unknown trajectory kind '{spec.kind}'")

    def at(self, t: float) -> TruthState:
        s = self.spec
        if s.kind == "circle":
            psi = s.angular_rate * t
            c = np.asarray(s.center, dtype=float)
            pos = c + np.array(
                [s.radius * np.cos(psi), s.radius * np.sin(psi), s.height]
            )
            vel = s.radius * s.angular_rate * np.array([-np.sin(psi), np.cos(psi), 0.0])
            acc = -s.radius * s.angular_rate**2 * np.array([np.cos(psi), np.sin(psi), 0.0])
            rot = _rz(psi) @ self._r0
            omega_body = s.angular_rate * rot.T @ np.array([0.0, 0.0, 1.0])
            return TruthState(rot, vel, pos, omega_body, acc)
        if s.kind == "lissajous":
            a = np.asarray(s.amplitudes, dtype=float)
            w = 2.0 * np.pi * np.asarray(s.frequencies, dtype=float)
            ph = np.array([0.0, s.phase, 0.0])
            c = np.asarray(s.center, dtype=float)
            pos = c + a * np.sin(w * t + ph)
            vel = a * w * np.cos(w * t + ph)
            acc = -a * w**2 * np.sin(w * t + ph)
            return TruthState(self._r0, vel, pos, np.zeros(3), acc)
        return self._stop_and_go(t)

    def _stop_and_go(self, t: float) -> TruthState:
        s = self.spec
        cycle = s.static_time + s.move_time
        n, phase = divmod(t, cycle)
        base = n * s.move_distance
        c = np.asarray(s.center, dtype=float)
        if phase < s.static_time:
            pos = c + np.array([base, 0.0, 0.0])
            return TruthState(self._r0, np.zeros(3), pos, np.zeros(3), np.zeros(3))
        u = (phase - s.static_time) / s.move_time
        sig = 6 * u**5 - 15 * u**4 + 10 * u**3
        dsig = (30 * u**4 - 60 * u**3 + 30 * u**2) / s.move_time
        ddsig = (120 * u**3 - 180 * u**2 + 60 * u) / s.move_time**2
        pos = c + np.array([base + s.move_distance * sig, 0.0, 0.0])
        vel = np.array([s.move_distance * dsig, 0.0, 0.0])
        acc = np.array([s.move_distance * ddsig, 0.0, 0.0])
        return TruthState(self._r0, vel, pos, np.zeros(3), acc)


def generate_ground_truth(spec: TrajectorySpec, times=None):
    """Truth states at the given times (default: camera-frame times)."""
    traj = Trajectory(spec)
    if times is None:
        n = int(round(spec.duration * spec.cam_rate))
        times = np.arange(n + 1) / spec.cam_rate
    return [(float(t), traj.at(float(t))) for t in times]


@dataclass(frozen=True)
class SceneObjectSpec:
    object_id: int
    class_id: int
    rotation: tuple
    position: tuple
    delta_landmarks: tuple = ()
    delta_semiaxes: tuple = (0.0, 0.0, 0.0)

    def instance(self, cls: ObjectClass) -> ObjectInstance:
        ds = np.array(self.delta_landmarks, dtype=float)
        if ds.size == 0:
            ds = np.zeros((3, cls.num_landmarks))
        return ObjectInstance(
            Pose(np.array(self.rotation, dtype=float), np.array(self.position, dtype=float)),
            ds.reshape(3, cls.num_landmarks),
            np.array(self.delta_semiaxes, dtype=float),
        )


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple = ()
    num_landmarks: int = 200
    landmark_lower: tuple = (-12.0, -12.0, -2.0)
    landmark_upper: tuple = (12.0, 12.0, 4.0)
    landmark_keepout: float = 0.0  # radius around the world origin to keep clear
    pixel_sigma: float = 1.0  # pixels
    focal: float = 500.0  # pixels; converts pixel noise to normalized units
    fov_tan: float = 1.0  # half-FOV tangent for visibility
    min_depth: float = 0.5
    max_depth: float = 40.0
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    initial_bias_gyro: tuple = (0.0, 0.0, 0.0)
    initial_bias_accel: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    @property
    def pixel_sigma_normalized(self) -> float:
        return self.pixel_sigma / self.focal


def car_like_class(semantic_id=2) -> ObjectClass:
    """12-part car model: lights, wheels, mirrors, and roof corners."""
    landmarks = np.array(
        [
            [1.9, 0.8, -0.3], [1.9, -0.8, -0.3],
            [-1.9, 0.8, -0.1], [-1.9, -0.8, -0.1],
            [1.3, 0.85, -0.5], [1.3, -0.85, -0.5],
            [-1.3, 0.85, -0.5], [-1.3, -0.85, -0.5],
            [0.9, 0.8, 0.4], [0.9, -0.8, 0.4],
            [0.4, 0.6, 0.6], [-0.6, 0.6, 0.6],
        ]
    ).T
    return ObjectClass(semantic_id, landmarks, np.array([2.0, 0.95, 0.7]))


def default_classes():
    cls = car_like_class()
    return {cls.semantic_id: cls}


def generate_landmarks(scene: SceneSpec, rng):
    lo = np.asarray(scene.landmark_lower, dtype=float)
    hi = np.asarray(scene.landmark_upper, dtype=float)
    points = []
    while len(points) < scene.num_landmarks:
        p = rng.uniform(lo, hi)
        if scene.landmark_keepout and np.linalg.norm(p[:2]) < scene.landmark_keepout:
            continue
        points.append(p)
    return np.array(points)


def generate_imu(spec: TrajectorySpec, scene: SceneSpec, rng):
    """Noisy IMU stream at `imu_rate` plus the true bias walks.

    Returns ``(samples, biases)`` where ``samples`` is a list of
    ``(t_start, InertialSample)`` with values taken at interval midpoints,
    and ``biases`` maps each sample index to ``(b_g, b_a)``.  White noise
    is discretized as sigma/sqrt(dt) and the walks as sigma*sqrt(dt).
    """
    traj = Trajectory(spec)
    dt = 1.0 / spec.imu_rate
    n = int(round(spec.duration * spec.imu_rate))
    noise = scene.imu_noise
    bg = np.array(scene.initial_bias_gyro, dtype=float)
    ba = np.array(scene.initial_bias_accel, dtype=float)
    samples, biases = [], []
    sigma_w = noise.sigma_w / np.sqrt(dt)
    sigma_a = noise.sigma_a / np.sqrt(dt)
    for i in range(n):
        t = i * dt
        truth = traj.at(t + dt / 2.0)
        omega = truth.omega_body + bg + rng.normal(0.0, sigma_w, 3)
        accel = truth.rotation.T @ (truth.accel_world - GRAVITY) + ba
        accel = accel + rng.normal(0.0, sigma_a, 3)
        samples.append((t, InertialSample(omega, accel, dt)))
        biases.append((bg.copy(), ba.copy()))
        bg = bg + rng.normal(0.0, noise.sigma_bg * np.sqrt(dt), 3)
        ba = ba + rng.normal(0.0, noise.sigma_ba * np.sqrt(dt), 3)
    return samples, biases


def _visible(scene: SceneSpec, cam_point) -> bool:
    z = cam_point[2]
    if not scene.min_depth < z < scene.max_depth:
        return False
    return abs(cam_point[0] / z) <= scene.fov_tan and abs(cam_point[1] / z) <= scene.fov_tan


def projected_conic(cam: Pose, obj_pose: Pose, u_total):
    """Dual conic of the object ellipsoid in the normalized image plane."""
    q_world = transform_dual_quadric(obj_pose, dual_quadric(u_total))
    m = cam.inverse().matrix()
    return (m @ q_world @ m.T)[:3, :3]


def conic_axis_extents(cam: Pose, obj_pose: Pose, u_total):
    """Axis-aligned tangent coordinates ((x0, x1), (y0, y1)) of the
    projected dual conic, or [] when the projection is not a real bounded
    ellipse in front of the camera.  A line ``x = x0`` (etc.) is tangent
    exactly when the discriminant below vanishes."""
    c_star = projected_conic(cam, obj_pose, u_total)
    if abs(c_star[2, 2]) < 1e-12:
        return []
    coords = []
    for i in (0, 1):
        disc = c_star[i, 2] ** 2 - c_star[i, i] * c_star[2, 2]
        if disc <= 0:
            return []
        lo = (c_star[i, 2] - np.sqrt(disc)) / c_star[2, 2]
        hi = (c_star[i, 2] + np.sqrt(disc)) / c_star[2, 2]
        coords.append((min(lo, hi), max(lo, hi)))
    return coords


def _lines_from_extents(x_extent, y_extent):
    (x0, x1), (y0, y1) = x_extent, y_extent
    center = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
    lines = [
        np.array([1.0, 0.0, -x0]),
        np.array([1.0, 0.0, -x1]),
        np.array([0.0, 1.0, -y0]),
        np.array([0.0, 1.0, -y1]),
    ]
    return [normalize_bbox_line(l, interior_point=center) for l in lines]


def generate_camera_frame(
    truth_pose: Pose,
    landmarks,
    objects,
    classes,
    scene: SceneSpec,
    rng,
    t: float,
    imu: InertialSample | None,
) -> MeasurementFrame:
    """Forward-model one camera frame with ground-truth associations."""
    sigma = scene.pixel_sigma_normalized
    cam_inv = truth_pose.inverse()
    keypoints = []
    for lid, point in enumerate(landmarks):
        c = cam_inv.apply(point)
        if not _visible(scene, c):
            continue
        z = c[:2] / c[2] + rng.normal(0.0, sigma, 2)
        keypoints.append((lid, z))

    object_measurements = []
    for spec in objects:
        cls = classes[spec.class_id]
        inst = spec.instance(cls)
        center_cam = cam_inv.apply(inst.pose.translation)
        if center_cam[2] <= 0:
            continue  # behind the camera: omitted this frame
        if not _visible(scene, center_cam):
            continue
        kps = []
        lm = inst.landmarks(cls)
        world = inst.pose.apply(lm)
        for l_idx in range(cls.num_landmarks):
            c = cam_inv.apply(world[:, l_idx])
            if not _visible(scene, c):
                continue
            kps.append((l_idx, c[:2] / c[2] + rng.normal(0.0, sigma, 2)))
        extents = conic_axis_extents(truth_pose, inst.pose, inst.semiaxes(cls))
        if not extents:
            continue
        (x0, x1), (y0, y1) = extents
        bound = scene.fov_tan
        if x0 < -bound or x1 > bound or y0 < -bound or y1 > bound:
            continue  # box clipped by the image border: skip this frame
        noisy = (
            (x0 + rng.normal(0.0, sigma), x1 + rng.normal(0.0, sigma)),
            (y0 + rng.normal(0.0, sigma), y1 + rng.normal(0.0, sigma)),
        )
        lines = _lines_from_extents(*noisy)
        object_measurements.append(
            ObjectFrameMeasurement(
                instance_id=spec.object_id,
                class_id=spec.class_id,
                keypoints=tuple(kps),
                lines=tuple(lines),
            )
        )
    return MeasurementFrame(
        t=t, imu=imu, keypoints=tuple(keypoints), objects=tuple(object_measurements)
    )


@dataclass
class Dataset:
    spec: TrajectorySpec
    scene: SceneSpec
    imu: list  # [(t, InertialSample)]
    frames: list  # [MeasurementFrame]
    truth: list  # [(t, TruthState, bias_gyro, bias_accel)]
    landmarks: np.ndarray
    classes: dict


def simulate_dataset(spec: TrajectorySpec, scene: SceneSpec, classes=None) -> Dataset:
    """Full deterministic dataset: IMU stream, camera frames, ground truth."""
    classes = classes if classes is not None else default_classes()
    seq = np.random.SeedSequence(scene.seed)
    rng_imu, rng_cam, rng_scene = [np.random.default_rng(s) for s in seq.spawn(3)]

    landmarks = generate_landmarks(scene, rng_scene)
    imu_samples, biases = generate_imu(spec, scene, rng_imu)

    traj = Trajectory(spec)
    per_frame = int(round(spec.imu_rate / spec.cam_rate))
    n_frames = int(round(spec.duration * spec.cam_rate))
    frames, truth = [], []
    for k in range(n_frames + 1):
        t = k / spec.cam_rate
        state = traj.at(t)
        idx = min(k * per_frame, len(biases) - 1)
        truth.append((t, state, biases[idx][0], biases[idx][1]))
        if k == 0:
            frame_imu = None
        else:
            chunk = [s for _, s in imu_samples[(k - 1) * per_frame : k * per_frame]]
            frame_imu = InertialSample(
                np.mean([s.omega for s in chunk], axis=0),
                np.mean([s.accel for s in chunk], axis=0),
                1.0 / spec.cam_rate,
            )
        pose = Pose(state.rotation, state.position)
        frames.append(
            generate_camera_frame(
                pose, landmarks, scene.objects, classes, scene, rng_cam, t, frame_imu
            )
        )
    return Dataset(spec, scene, imu_samples, frames, truth, landmarks, classes)
