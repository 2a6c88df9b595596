"""Landmark triangulation, object initialization, and LM refinement."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegeneratePlane,
    InsufficientObservations,
    InsufficientParallax,
    NonPositiveDepth,
    NonPositiveSemiAxis,
    RankDeficient,
    ShapeCollapsed,
)
from .lie import Pose, se3_exp, so3_log
from .residuals import (
    ObjectClass,
    ObjectInstance,
    bbox_error,
    bbox_error_quadratic,
    object_state_dim,
    regularization_error,
    semantic_error,
)

MIN_SEMIAXIS = 0.01  # meters; optimizer clamps u + delta_u above this


@dataclass(frozen=True)
class LmConfig:
    """Levenberg-Marquardt schedule and residual weights."""

    max_iters: int = 20
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    step_tol: float = 1e-8
    cost_tol: float = 1e-9
    w_geom: float = 1.0
    w_sem: float = 1.0
    w_bbox: float = 1.0
    w_reg: float = 1.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class LmResult:
    converged: bool
    iterations: int
    cost: float
    max_iters_exceeded: bool = False


@dataclass(frozen=True)
class Track:
    """Observations of one geometric landmark or one object instance.

    For geometric tracks, ``observations`` maps frame index to a 2-vector.
    For object tracks it maps frame index to an :class:`ObjectObservation`.
    Frame indices are strictly increasing.
    """

    track_id: int
    kind: str  # "geometric" | "object"
    observations: tuple
    class_id: int = -1

    def __post_init__(self):
        frames = [f for f, _ in self.observations]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("track frame indices must be strictly increasing")
        object.__setattr__(self, "observations", tuple(self.observations))


@dataclass(frozen=True)
class ObjectObservation:
    """Per-frame object measurement: semantic keypoints and 4 box lines."""

    keypoints: tuple  # ((landmark_index, 2-vector), ...)
    lines: tuple  # up to 4 lines, each a 3-vector

    def __post_init__(self):
        object.__setattr__(
            self,
            "keypoints",
            tuple((int(i), np.asarray(z, dtype=float)) for i, z in self.keypoints),
        )
        object.__setattr__(
            self, "lines", tuple(np.asarray(l, dtype=float) for l in self.lines)
        )


def triangulate_landmark(cams, zs, min_baseline=1e-3, max_condition=1e8):
    """Linear least-squares point from normalized observations in >= 2 views.

    Depths are eliminated per view, leaving a 2K x 3 system in the point.
    Returns ``(point, rms_reprojection_residual)``.

    Raises:
        InsufficientParallax: baseline below `min_baseline` or the stacked
            system condition number exceeds `max_condition`.
    """
    if len(cams) < 2 or len(cams) != len(zs):
        raise InsufficientParallax("need at least two views")
    centers = np.array([c.translation for c in cams])
    baseline = max(
        np.linalg.norm(a - b) for a, b in itertools.combinations(centers, 2)
    )
    if baseline <= min_baseline:
        raise InsufficientParallax(f"baseline {baseline:.2g} m too small")

    rts = np.stack([c.rotation.T for c in cams])  # (K, 3, 3)
    ts = np.einsum("kij,kj->ki", rts, centers)  # R^T p per view
    z = np.asarray(zs, dtype=float)  # (K, 2)
    rows = rts[:, :2, :] - z[:, :, None] * rts[:, 2:3, :]
    rhs = ts[:, :2] - z * ts[:, 2:3]
    a = rows.reshape(-1, 3)
    b = rhs.ravel()
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[-1] <= 0 or s[0] / s[-1] > max_condition:
        raise InsufficientParallax(f"triangulation condition number {s[0] / s[-1]:.2g}")
    point = vt.T @ ((u.T @ b) / s)

    cam_pts = np.einsum("kij,kj->ki", rts, point[None, :] - centers)
    resid = cam_pts[:, :2] / cam_pts[:, 2:3] - z
    return point, float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


def kabsch_align(src, dst, degeneracy_tol=1e-6):
    """Proper rigid transform minimizing ||dst - (R src + p)||^2 over columns.

    Raises:
        DegenerateConfiguration: fewer than 3 points or (near-)collinear src.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.shape[0] != 3 or src.shape[1] < 3:
        raise DegenerateConfiguration("need matching 3xN point sets with N >= 3")
    c_src = src.mean(axis=1, keepdims=True)
    c_dst = dst.mean(axis=1, keepdims=True)
    h = (src - c_src) @ (dst - c_dst).T
    sing = np.linalg.svd(src - c_src, compute_uv=False)
    if sing[1] < degeneracy_tol * max(sing[0], 1.0):
        raise DegenerateConfiguration("source points are near-collinear")
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    p = c_dst[:, 0] - r @ c_src[:, 0]
    return Pose(r, p)


def init_object_pose_keypoints(cams_by_frame, track: Track, cls: ObjectClass) -> Pose:
    """Object pose from triangulated semantic landmarks aligned to the mean shape.

    Needs at least three distinct landmarks each observed in two or more
    frames; returns the Kabsch alignment mapping mean-shape landmarks onto
    their triangulated world positions.
    """
    views = {}
    for frame, obs in track.observations:
        if frame not in cams_by_frame:
            continue
        for l_idx, z in obs.keypoints:
            views.setdefault(l_idx, []).append((cams_by_frame[frame], z))
    world = {}
    for l_idx, pairs in views.items():
        if len(pairs) < 2:
            continue
        try:
            point, _ = triangulate_landmark([c for c, _ in pairs], [z for _, z in pairs])
        except InsufficientParallax:
            continue
        world[l_idx] = point
    if len(world) < 3:
        raise InsufficientObservations(
            f"only {len(world)} semantic landmarks triangulated; need 3"
        )
    idx = sorted(world)
    src = cls.mean_landmarks[:, idx]
    dst = np.column_stack([world[i] for i in idx])
    return kabsch_align(src, dst)


def _symmetric_basis():
    """Index pairs and duplication factors of the 10 unique entries of a
    symmetric 4x4, used to keep antisymmetric junk out of the null space."""
    pairs = [(i, j) for i in range(4) for j in range(i, 4)]
    factors = np.array([1.0 if i == j else 2.0 for i, j in pairs])
    return pairs, factors


def fit_dual_quadric(planes, sv_ratio_min=50.0):
    """Dual quadric tangent to the given homogeneous world-frame planes.

    Solves ``min |M w|`` over unit-norm symmetric parameter vectors via SVD.
    Returns the symmetric 4x4, scaled so its (3,3) entry is -1.

    Raises:
        RankDeficient: fewer than 9 planes, or the smallest singular value
            is not isolated (sigma_9 / sigma_10 ratio test).
    """
    planes = [np.asarray(p, dtype=float) for p in planes]
    if len(planes) < 9:
        raise RankDeficient(f"{len(planes)} tangent planes < 9")
    pairs, factors = _symmetric_basis()
    m = np.zeros((len(planes), 10))
    for r, pi in enumerate(planes):
        pi = pi / np.linalg.norm(pi)
        m[r] = factors * np.array([pi[i] * pi[j] for i, j in pairs])
    _, s, vt = np.linalg.svd(m)
    if len(s) < 10 or s[8] < sv_ratio_min * max(s[9], s[0] * 1e-15):
        raise RankDeficient("smallest singular value not isolated")
    w = vt[-1]
    q = np.zeros((4, 4))
    for val, (i, j) in zip(w, pairs):
        q[i, j] = val
        q[j, i] = val
    if abs(q[3, 3]) < 1e-12:
        raise RankDeficient("fitted quadric is degenerate (zero homogeneous scale)")
    return q / -q[3, 3]


def _rotation_from_axes(a, u, reference: Pose = None):
    """Rotation whose columns are eigenvectors of `a` matched to sorted u^2.

    Column k carries the eigenvector whose eigenvalue has the same rank as
    u[k]^2; the proper sign combination closest to `reference` (identity
    when absent) resolves the remaining ambiguity.
    """
    evals, evecs = np.linalg.eigh(a)
    order = np.argsort(np.argsort(u**2))  # eigh sorts ascending
    v = evecs[:, order]
    ref = reference.rotation if reference is not None else np.eye(3)
    best = None
    for signs in itertools.product([1.0, -1.0], repeat=3):
        cand = v * np.array(signs)
        if np.linalg.det(cand) < 0:
            continue
        dist = np.linalg.norm(cand - ref)
        if best is None or dist < best[0]:
            best = (dist, cand)
    return best[1]


def init_object_pose_ellipsoid(planes, u, reference: Pose = None) -> Pose:
    """Object pose from tangent-plane constraints on the class ellipsoid.

    ``planes`` are homogeneous world-frame planes tangent to the object's
    dual quadric.  The quadric is fit by SVD and decomposed into rotation
    and translation; eigenvalue-to-axis assignment follows the sorted
    semi-axes with signs resolved toward `reference` (or the identity).
    """
    q = fit_dual_quadric(planes)
    p = -q[:3, 3]
    a = q[:3, :3] + np.outer(p, p)
    u = np.asarray(u, dtype=float)
    r = _rotation_from_axes(a, u, reference)
    return Pose(r, p)


def _weighted(rows_e, rows_j, weight):
    scale = np.sqrt(weight)
    return scale * rows_e, scale * rows_j


class _LandmarkSystem:
    """Batched reprojection residuals of one track; cameras fixed per LM run.

    Numerically identical to stacking `geometric_error` per observation
    (asserted by the test suite); batching just removes per-call overhead.
    """

    def __init__(self, track, cams_by_frame, weight, depth_min=1e-3):
        cams, zs = [], []
        for frame, z in track.observations:
            cam = cams_by_frame.get(frame)
            if cam is not None:
                cams.append(cam)
                zs.append(z)
        self.rts = np.stack([c.rotation.T for c in cams])
        self.centers = np.stack([c.translation for c in cams])
        self.zs = np.asarray(zs, dtype=float)
        self.scale = np.sqrt(weight)
        self.depth_min = depth_min

    def __call__(self, point):
        c = np.einsum("kij,kj->ki", self.rts, point[None, :] - self.centers)
        if np.any(c[:, 2] <= self.depth_min):
            raise NonPositiveDepth("landmark behind a track camera")
        inv_z = 1.0 / c[:, 2]
        e = c[:, :2] * inv_z[:, None] - self.zs
        # d(pi)/dc rows: [1/z, 0, -x/z^2], [0, 1/z, -y/z^2]; chain with R^T.
        jproj = np.zeros((len(c), 2, 3))
        jproj[:, 0, 0] = inv_z
        jproj[:, 1, 1] = inv_z
        jproj[:, :, 2] = -c[:, :2] * (inv_z**2)[:, None]
        j = np.einsum("kab,kbc->kac", jproj, self.rts)
        return self.scale * e.ravel(), self.scale * j.reshape(-1, 3)


def optimize_landmark(track, cams_by_frame, initial, cfg: LmConfig,
                      v_geom: float = 1.0):
    """LM refinement of a triangulated point over its track.

    Returns ``(point, LmResult)``; on iteration exhaustion the best iterate
    is returned with ``max_iters_exceeded`` set.
    """
    system = _LandmarkSystem(track, cams_by_frame, cfg.w_geom / v_geom)
    point = np.array(initial, dtype=float)
    lam = cfg.damping_init
    e, j = system(point)
    cost = float(e @ e)
    for it in range(cfg.max_iters):
        step = np.linalg.solve(j.T @ j + lam * np.eye(3), -j.T @ e)
        cand = point + step
        try:
            e_new, j_new = system(cand)
        except NonPositiveDepth:
            lam *= cfg.damping_up
            continue
        cost_new = float(e_new @ e_new)
        if cost_new <= cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            point, e, j, cost = cand, e_new, j_new, cost_new
            lam /= cfg.damping_down
            if np.linalg.norm(step) < cfg.step_tol or rel < cfg.cost_tol:
                return point, LmResult(True, it + 1, cost)
        else:
            lam *= cfg.damping_up
    return point, LmResult(False, cfg.max_iters, cost, max_iters_exceeded=True)


def object_residual_stack(track, cams_by_frame, extrinsics, inst, cls, cfg,
                   v_sem, v_bbox, use_quadratic):
    """Whitened residual stack and object-state Jacobian for the object LM."""
    es, js = [], []
    for frame, obs in track.observations:
        cam = cams_by_frame.get(frame)
        if cam is None:
            continue
        for l_idx, z in obs.keypoints:
            e, _, jo = semantic_error(cam, extrinsics, cls, inst, l_idx, z,
                                      state_jac=False)
            we, wj = _weighted(e, jo, cfg.w_sem / v_sem)
            es.append(we)
            js.append(wj)
        for line in obs.lines:
            if use_quadratic:
                e, _, jo = bbox_error_quadratic(cam, cls, inst, line)
            else:
                e, _, jo = bbox_error(cam, extrinsics, cls, inst, line, state_jac=False)
            we, wj = _weighted(np.atleast_1d(e), jo, cfg.w_bbox / v_bbox)
            es.append(we)
            js.append(wj)
    e_reg, j_reg = regularization_error(inst, cls.num_landmarks)
    we, wj = _weighted(e_reg, j_reg, cfg.w_reg)
    es.append(we)
    js.append(wj)
    return np.concatenate(es), np.vstack(js)


def _apply_object_step(inst: ObjectInstance, cls: ObjectClass, step):
    """Pose updated by right perturbation, deformations additively; the
    semi-axes step is clamped so every axis stays above MIN_SEMIAXIS."""
    n_s = cls.num_landmarks
    pose = inst.pose.compose(se3_exp(step[:6]))
    du = inst.delta_semiaxes + step[6:9]
    floor = MIN_SEMIAXIS - cls.mean_semiaxes
    clamped = np.maximum(du, floor)
    ds = inst.delta_landmarks + step[9:].reshape(n_s, 3).T
    return ObjectInstance(pose, ds, clamped), bool(np.any(du < floor))


def optimize_object(track, cams_by_frame, initial: ObjectInstance, cls: ObjectClass,
                    cfg: LmConfig, extrinsics: Pose = None,
                    v_sem: float = 1.0, v_bbox: float = 1.0,
                    use_quadratic_bbox: bool = False):
    """LM refinement of an object instance over its track.

    Returns ``(instance, LmResult)``.

    Raises:
        ShapeCollapsed: the semi-axis clamp engaged on every late iterate,
            i.e. the data keeps driving an axis below the minimum size.
    """
    extrinsics = extrinsics if extrinsics is not None else Pose.identity()
    inst = initial
    lam = cfg.damping_init
    args = (cams_by_frame, extrinsics)
    e, j = object_residual_stack(track, *args, inst, cls, cfg, v_sem, v_bbox, use_quadratic_bbox)
    cost = float(e @ e)
    dim = object_state_dim(cls)
    clamp_streak = 0
    for it in range(cfg.max_iters):
        step = np.linalg.solve(j.T @ j + lam * np.eye(dim), -j.T @ e)
        cand, clamped = _apply_object_step(inst, cls, step)
        if clamped:
            clamp_streak += 1
            if clamp_streak >= 3:
                raise ShapeCollapsed("semi-axes pinned at the minimum size")
        else:
            clamp_streak = 0
        try:
            e_new, j_new = object_residual_stack(
                track, *args, cand, cls, cfg, v_sem, v_bbox, use_quadratic_bbox
            )
        except (NonPositiveDepth, DegeneratePlane, NonPositiveSemiAxis):
            lam *= cfg.damping_up
            continue
        cost_new = float(e_new @ e_new)
        if cost_new <= cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            inst, e, j, cost = cand, e_new, j_new, cost_new
            lam /= cfg.damping_down
            if np.linalg.norm(step) < cfg.step_tol or rel < cfg.cost_tol:
                return inst, LmResult(True, it + 1, cost)
        else:
            lam *= cfg.damping_up
    return inst, LmResult(False, cfg.max_iters, cost, max_iters_exceeded=True)


def object_gauss_newton_gradient(track, cams_by_frame, inst, cls, cfg,
                                 extrinsics: Pose = None,
                                 v_sem: float = 1.0, v_bbox: float = 1.0):
    """Gradient norm of the weighted object cost at `inst` (for diagnostics)."""
    extrinsics = extrinsics if extrinsics is not None else Pose.identity()
    e, j = object_residual_stack(track, cams_by_frame, extrinsics, inst, cls, cfg,
                          v_sem, v_bbox, False)
    return float(np.linalg.norm(j.T @ e))
