import numpy as np
import pytest

from semvio.errors import (
    DegenerateConfiguration,
    InsufficientParallax,
    RankDeficient,
)
from semvio.backend import (
    LmConfig,
    ObjectObservation,
    Track,
    fit_dual_quadric,
    init_object_pose_ellipsoid,
    init_object_pose_keypoints,
    kabsch_align,
    object_gauss_newton_gradient,
    optimize_landmark,
    optimize_object,
    triangulate_landmark,
)
from semvio.lie import Pose, dual_quadric, se3_exp, so3_exp, so3_log, transform_dual_quadric
from semvio.residuals import ObjectClass, ObjectInstance

from conftest import random_pose, random_rotation


def project_point(cam: Pose, point):
    c = cam.inverse().apply(point)
    return c[:2] / c[2]


def looking_at(target, position):
    z = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 0.95:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    return Pose(np.column_stack([x, np.cross(z, x), z]), position)


def box_tangent_lines(cam: Pose, obj_pose: Pose, u_total):
    """Axis-aligned tangent lines of the projected dual conic (oracle-grade)."""
    q_world = transform_dual_quadric(obj_pose, dual_quadric(u_total))
    m = cam.inverse().matrix()
    c_star = (m @ q_world @ m.T)[:3, :3]
    lines = []
    for (i, j) in ((0, 2), (1, 2)):
        disc = c_star[i, 2] ** 2 - c_star[i, i] * c_star[2, 2]
        if disc <= 0:
            return []
        for sign in (-1.0, 1.0):
            x0 = (c_star[i, 2] + sign * np.sqrt(disc)) / c_star[2, 2]
            line = np.zeros(3)
            line[i] = 1.0
            line[2] = -x0
            lines.append(line)
    return lines


class TestTriangulation:
    def test_two_view_exact_recovery(self):
        point = np.array([0.5, 0.0, 3.0])
        cams = [Pose(np.eye(3), [0.0, 0, 0]), Pose(np.eye(3), [1.0, 0, 0])]
        zs = [project_point(c, point) for c in cams]
        got, residual = triangulate_landmark(cams, zs)
        assert np.allclose(got, point, atol=1e-12)
        assert residual < 1e-12

    def test_zero_baseline_rejected(self):
        cam = Pose(np.eye(3), [0.0, 0, 0])
        with pytest.raises(InsufficientParallax):
            triangulate_landmark([cam, cam], [[0.1, 0.1], [0.1, 0.1]])

    def test_five_view_random_geometry(self, rng):
        for _ in range(20):
            point = rng.uniform(-1, 1, 3)
            cams = [
                looking_at(point, point + rng.uniform(3, 8) * _unit(rng))
                for _ in range(5)
            ]
            zs = [project_point(c, point) for c in cams]
            got, _ = triangulate_landmark(cams, zs)
            assert np.linalg.norm(got - point) < 1e-9


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


class TestKabsch:
    def test_identity(self, rng):
        pts = rng.uniform(-2, 2, size=(3, 6))
        pose = kabsch_align(pts, pts)
        assert np.allclose(pose.matrix(), np.eye(4), atol=1e-12)

    def test_exact_recovery(self, rng):
        for _ in range(20):
            pts = rng.uniform(-2, 2, size=(3, 8))
            truth = random_pose(rng)
            pose = kabsch_align(pts, truth.apply(pts))
            assert np.allclose(pose.matrix(), truth.matrix(), atol=1e-9)

    def test_output_always_proper_rotation(self, rng):
        for _ in range(20):
            pose = kabsch_align(rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (3, 5)))
            r = pose.rotation
            assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9
            assert np.linalg.det(r) > 0

    def test_reflection_case_vs_rotation_sampling_oracle(self, rng):
        # A mirrored tetrahedron (non-coplanar points) cannot be matched by
        # any proper rigid motion, so the best cost must stay positive.
        src = np.array(
            [[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]]
        ).T
        dst = np.array(src)
        dst[0] *= -1.0
        pose = kabsch_align(src, dst)

        def cost(r, p):
            return float(np.sum((dst - (r @ src + p[:, None])) ** 2))

        best_cost = cost(pose.rotation, pose.translation)
        assert best_cost > 1e-6
        for _ in range(20000):
            r = random_rotation(rng)
            c_src = src.mean(axis=1)
            c_dst = dst.mean(axis=1)
            p = c_dst - r @ c_src
            assert cost(r, p) >= best_cost - 1e-9

    def test_collinear_rejected(self, rng):
        t = np.linspace(0, 1, 5)
        src = np.outer(np.array([1.0, 2.0, -1.0]), t)
        with pytest.raises(DegenerateConfiguration):
            kabsch_align(src, src)


def car_class():
    s = np.array(
        [
            [1.9, 0.8, -0.3], [1.9, -0.8, -0.3],    # headlights
            [-1.9, 0.8, -0.1], [-1.9, -0.8, -0.1],  # taillights
            [1.3, 0.85, -0.5], [1.3, -0.85, -0.5],  # front wheels
            [-1.3, 0.85, -0.5], [-1.3, -0.85, -0.5],  # rear wheels
            [0.9, 0.8, 0.4], [0.9, -0.8, 0.4],      # mirrors
            [0.4, 0.6, 0.6], [-0.6, 0.6, 0.6],      # roof corners
        ]
    ).T
    return ObjectClass(semantic_id=2, mean_landmarks=s, mean_semiaxes=[2.0, 0.95, 0.7])


def make_object_track(cams_by_frame, cls, inst, keypoint_subset=None):
    obs = []
    lm = inst.landmarks(cls)
    for frame, cam in sorted(cams_by_frame.items()):
        kps = []
        for l in range(cls.num_landmarks):
            if keypoint_subset is not None and l not in keypoint_subset:
                continue
            kps.append((l, project_point(cam, inst.pose.apply(lm[:, l]))))
        lines = box_tangent_lines(cam, inst.pose, inst.semiaxes(cls))
        obs.append((frame, ObjectObservation(tuple(kps), tuple(lines))))
    return Track(track_id=1, kind="object", observations=tuple(obs), class_id=cls.semantic_id)


def ring_cameras(center, radius=8.0, count=6, height=1.0):
    cams = {}
    for k in range(count):
        ang = 2 * np.pi * k / count
        pos = np.asarray(center) + np.array(
            [radius * np.cos(ang), radius * np.sin(ang), height]
        )
        cams[k] = looking_at(center, pos)
    return cams


class TestKeypointInit:
    def test_identity_when_world_equals_shape(self, rng):
        cls = car_class()
        inst = ObjectInstance.rest(cls)
        cams = ring_cameras([0.0, 0.0, 0.0])
        track = make_object_track(cams, cls, inst)
        pose = init_object_pose_keypoints(cams, track, cls)
        assert np.allclose(pose.matrix(), np.eye(4), atol=1e-9)

    def test_exact_recovery_of_rigid_transform(self, rng):
        cls = car_class()
        truth = Pose(so3_exp([0.1, -0.2, 1.2]), np.array([1.0, -2.0, 0.3]))
        inst = ObjectInstance.rest(cls, truth)
        cams = ring_cameras(truth.translation)
        track = make_object_track(cams, cls, inst)
        pose = init_object_pose_keypoints(cams, track, cls)
        assert np.allclose(pose.matrix(), truth.matrix(), atol=1e-9)


class TestEllipsoidInit:
    def planes_for(self, cams_by_frame, obj_pose, u):
        planes = []
        for _, cam in sorted(cams_by_frame.items()):
            m = cam.inverse().matrix()
            for line in box_tangent_lines(cam, obj_pose, u):
                planes.append(m.T @ np.append(line, 0.0))
        return planes

    def test_quadric_recovered_up_to_scale(self, rng):
        cls = car_class()
        truth = Pose(so3_exp([0.0, 0.0, 0.7]), np.array([0.5, -0.4, 0.2]))
        planes = self.planes_for(ring_cameras(truth.translation), truth, cls.mean_semiaxes)
        q = fit_dual_quadric(planes)
        q_true = transform_dual_quadric(truth, dual_quadric(cls.mean_semiaxes))
        q_true = q_true / -q_true[3, 3]
        assert np.max(np.abs(q - q_true)) / np.max(np.abs(q_true)) < 1e-6

    def test_tangency_reproduced(self, rng):
        cls = car_class()
        truth = Pose(random_rotation(rng), np.array([0.2, 0.1, 0.0]))
        planes = self.planes_for(ring_cameras(truth.translation), truth, cls.mean_semiaxes)
        q = fit_dual_quadric(planes)
        for p in planes:
            p = p / np.linalg.norm(p)
            assert abs(p @ q @ p) < 1e-6

    def test_pose_recovery(self, rng):
        cls = car_class()
        truth = Pose(so3_exp([0.0, 0.0, -0.9]), np.array([1.5, 0.3, -0.1]))
        planes = self.planes_for(ring_cameras(truth.translation), truth, cls.mean_semiaxes)
        pose = init_object_pose_ellipsoid(planes, cls.mean_semiaxes)
        assert np.linalg.norm(pose.translation - truth.translation) < 1e-6
        # Rotation is recovered up to the symmetry of the ellipsoid; for
        # distinct semi-axes the axes must agree up to sign.
        rel = pose.rotation.T @ truth.rotation
        assert np.allclose(np.abs(rel), np.eye(3), atol=1e-6)

    def test_sphere_center(self, rng):
        u = np.array([1.0, 1.0, 1.0])
        truth = Pose(np.eye(3), np.zeros(3))
        planes = self.planes_for(ring_cameras([0, 0, 0], radius=5.0), truth, u)
        pose = init_object_pose_ellipsoid(planes, u)
        assert np.linalg.norm(pose.translation) < 1e-8
        r = pose.rotation
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9

    def test_eight_planes_rejected(self, rng):
        cls = car_class()
        truth = Pose(np.eye(3), np.zeros(3))
        planes = self.planes_for(ring_cameras([0, 0, 0], count=2), truth, cls.mean_semiaxes)
        with pytest.raises(RankDeficient):
            fit_dual_quadric(planes[:8])


class TestLandmarkSystemConsistency:
    def test_batched_system_equals_per_observation_errors(self, rng):
        # The batched LM system must agree exactly with stacking the
        # reference residual implementation observation by observation.
        from semvio.backend import _LandmarkSystem
        from semvio.residuals import geometric_error
        from semvio.lie import Pose as _P

        point = rng.uniform(-1, 1, 3)
        cams = {f: looking_at(point, point + rng.uniform(4, 8) * _unit(rng))
                for f in range(6)}
        track = Track(
            0, "geometric",
            tuple((f, project_point(cams[f], point) + 0.01 * rng.normal(size=2))
                  for f in range(6)),
        )
        weight = 3.7
        system = _LandmarkSystem(track, cams, weight)
        for _ in range(5):
            p = point + 0.2 * rng.normal(size=3)
            e, j = system(p)
            es, js = [], []
            for f, z in track.observations:
                ei, _, ji = geometric_error(cams[f], _P.identity(), p, z, state_jac=False)
                es.append(np.sqrt(weight) * ei)
                js.append(np.sqrt(weight) * ji)
            assert np.allclose(e, np.concatenate(es), atol=1e-13)
            assert np.allclose(j, np.vstack(js), atol=1e-13)


class TestOptimizeLandmark:
    def make_track(self, cams_by_frame, point):
        obs = tuple(
            (frame, project_point(cam, point)) for frame, cam in sorted(cams_by_frame.items())
        )
        return Track(track_id=0, kind="geometric", observations=obs)

    def test_zero_update_at_truth(self, rng):
        point = np.array([0.3, -0.2, 0.5])
        cams = ring_cameras(point, radius=5.0, count=5)
        track = self.make_track(cams, point)
        got, res = optimize_landmark(track, cams, point, LmConfig())
        assert res.converged
        assert np.linalg.norm(got - point) < 1e-12

    def test_recovers_from_perturbed_init(self, rng):
        for _ in range(10):
            point = rng.uniform(-1, 1, 3)
            cams = ring_cameras(point, radius=5.0, count=5)
            track = self.make_track(cams, point)
            init = point + 0.1 * _unit(rng)
            got, res = optimize_landmark(track, cams, init, LmConfig())
            assert np.linalg.norm(got - point) < 1e-7

    def test_monotone_cost_on_noisy_data(self, rng):
        point = np.array([0.0, 0.0, 0.0])
        cams = ring_cameras(point, radius=5.0, count=6)
        obs = tuple(
            (f, project_point(c, point) + rng.normal(0, 2e-3, 2))
            for f, c in sorted(cams.items())
        )
        track = Track(track_id=0, kind="geometric", observations=obs)
        costs = []
        init = point + np.array([0.2, -0.1, 0.15])

        # Re-run with increasing iteration caps; the reported cost of the
        # best iterate must be non-increasing in the cap.
        for iters in (1, 2, 4, 8, 16):
            _, res = optimize_landmark(track, cams, init, LmConfig(max_iters=iters))
            costs.append(res.cost)
        assert all(b <= a + 1e-15 for a, b in zip(costs, costs[1:]))


class TestOptimizeObject:
    def test_zero_update_at_truth(self, rng):
        cls = car_class()
        truth_pose = Pose(so3_exp([0.0, 0.0, 0.4]), np.array([0.3, 0.2, 0.0]))
        inst = ObjectInstance.rest(cls, truth_pose)
        cams = ring_cameras(truth_pose.translation)
        track = make_object_track(cams, cls, inst)
        got, res = optimize_object(track, cams, inst, cls, LmConfig())
        assert res.converged
        assert np.linalg.norm(got.pose.translation - truth_pose.translation) < 1e-10
        assert np.linalg.norm(so3_log(got.pose.rotation.T @ truth_pose.rotation)) < 1e-10

    def test_recovers_from_perturbed_pose(self, rng):
        cls = car_class()
        truth_pose = Pose(so3_exp([0.05, -0.02, -0.8]), np.array([-0.5, 1.0, 0.1]))
        truth = ObjectInstance.rest(cls, truth_pose)
        cams = ring_cameras(truth_pose.translation)
        track = make_object_track(cams, cls, truth)
        # 5 degrees, 0.2 m off.
        bad_pose = truth_pose.compose(
            se3_exp(np.concatenate([0.2 * _unit(rng), np.deg2rad(5.0) * _unit(rng)]))
        )
        init = ObjectInstance.rest(cls, bad_pose)
        got, res = optimize_object(track, cams, init, cls, LmConfig(max_iters=40))
        assert np.linalg.norm(got.pose.translation - truth_pose.translation) < 1e-3
        rot_err = np.linalg.norm(so3_log(got.pose.rotation.T @ truth_pose.rotation))
        assert np.rad2deg(rot_err) < 0.1

    def test_strong_regularizer_pins_deformations(self, rng):
        cls = car_class()
        truth_pose = Pose(np.eye(3), np.array([0.0, 0.0, 0.0]))
        truth = ObjectInstance(
            truth_pose,
            rng.uniform(-0.05, 0.05, (3, cls.num_landmarks)),
            rng.uniform(-0.05, 0.05, 3),
        )
        cams = ring_cameras([0, 0, 0])
        track = make_object_track(cams, cls, truth)
        init = ObjectInstance.rest(cls, truth_pose)
        got, _ = optimize_object(
            track, cams, init, cls, LmConfig(max_iters=60, w_reg=1e12)
        )
        assert np.max(np.abs(got.delta_semiaxes)) < 1e-4
        assert np.max(np.abs(got.delta_landmarks)) < 1e-4

    def test_gradient_small_at_optimum(self, rng):
        cls = car_class()
        truth_pose = Pose(so3_exp([0, 0, 0.3]), np.array([0.4, -0.3, 0.0]))
        truth = ObjectInstance.rest(cls, truth_pose)
        cams = ring_cameras(truth_pose.translation)
        track = make_object_track(cams, cls, truth)
        init = ObjectInstance.rest(
            cls, truth_pose.compose(se3_exp(0.02 * np.ones(6)))
        )
        got, _ = optimize_object(track, cams, init, cls, LmConfig(max_iters=60))
        grad = object_gauss_newton_gradient(track, cams, got, cls, LmConfig())
        assert grad < 1e-6
