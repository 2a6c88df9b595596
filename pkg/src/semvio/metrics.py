"""Trajectory and object-map evaluation metrics."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .lie import Pose, so3_log

DEFAULT_TE_DISTANCES = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0)


def align_to_first(gt_poses, est_poses):
    """Map the estimate so its first pose coincides with the ground truth."""
    t0 = gt_poses[0].compose(est_poses[0].inverse())
    return [t0.compose(p) for p in est_poses]


def rmse(gt_poses, est_poses) -> float:
    """Root-mean-square position error after first-frame alignment, meters."""
    if len(gt_poses) != len(est_poses) or not gt_poses:
        raise ValueError("pose lists must be non-empty and equal length")
    aligned = align_to_first(gt_poses, est_poses)
    sq = [
        float(np.sum(g.inverse().compose(e).translation ** 2))
        for g, e in zip(gt_poses, aligned)
    ]
    return float(np.sqrt(np.mean(sq)))


def _path_lengths(gt_poses):
    steps = [
        np.linalg.norm(b.translation - a.translation)
        for a, b in zip(gt_poses, gt_poses[1:])
    ]
    return np.concatenate([[0.0], np.cumsum(steps)])


def translation_error(gt_poses, est_poses, distances=DEFAULT_TE_DISTANCES,
                      start_stride=10) -> float:
    """Average relative translation drift over fixed path distances, percent.

    For each start frame (every `start_stride` frames) and each distance,
    the end frame is the first one at least that far along the ground-truth
    path; the drift is the residual of the relative motions, normalized by
    the distance.  Returns NaN when the path is too short for any pair.
    """
    if len(gt_poses) != len(est_poses):
        raise ValueError("pose lists must be equal length")
    arc = _path_lengths(gt_poses)
    pairs = []
    for i in range(0, len(gt_poses), start_stride):
        for d in distances:
            j = int(np.searchsorted(arc, arc[i] + d))
            if j >= len(gt_poses):
                break
            pairs.append((i, j, arc[j] - arc[i]))
    if not pairs:
        return float("nan")
    errors = []
    for i, j, length in pairs:
        rel_est = est_poses[j].inverse().compose(est_poses[i])
        rel_gt = gt_poses[j].inverse().compose(gt_poses[i])
        drift = rel_est.inverse().compose(rel_gt).translation
        errors.append(np.linalg.norm(drift) / length)
    return float(100.0 * np.mean(errors))


# -- oriented 3D boxes --------------------------------------------------------

_CORNERS = np.array(list(itertools.product([-1.0, 1.0], repeat=3)))
_EDGES = [
    (a, b)
    for a in range(8)
    for b in range(a + 1, 8)
    if np.sum(_CORNERS[a] != _CORNERS[b]) == 1
]


def box_vertices(pose: Pose, half_extents):
    return pose.apply((_CORNERS * np.asarray(half_extents, dtype=float)).T).T


def _points_inside(pose, half, points, tol=1e-9):
    local = pose.inverse().apply(np.asarray(points).T).T
    return points[np.all(np.abs(local) <= np.asarray(half) + tol, axis=1)]


def _clip_edge_points(pose_a, half_a, pose_b, half_b):
    """Endpoints of box-A edges clipped to the slab volume of box B."""
    verts_local = pose_b.inverse().apply(box_vertices(pose_a, half_a).T).T
    half_b = np.asarray(half_b, dtype=float)
    out = []
    for a, b in _EDGES:
        p, q = verts_local[a], verts_local[b]
        d = q - p
        t0, t1 = 0.0, 1.0
        ok = True
        for axis in range(3):
            if abs(d[axis]) < 1e-15:
                if abs(p[axis]) > half_b[axis] + 1e-12:
                    ok = False
                    break
                continue
            ta = (-half_b[axis] - p[axis]) / d[axis]
            tb = (half_b[axis] - p[axis]) / d[axis]
            lo, hi = min(ta, tb), max(ta, tb)
            t0, t1 = max(t0, lo), min(t1, hi)
            if t0 > t1:
                ok = False
                break
        if ok:
            out.append(p + t0 * d)
            out.append(p + t1 * d)
    if not out:
        return np.zeros((0, 3))
    return pose_b.apply(np.array(out).T).T


def box_intersection_volume(pose_a: Pose, half_a, pose_b: Pose, half_b) -> float:
    """Exact intersection volume of two oriented boxes (convex-convex)."""
    pts = np.vstack(
        [
            _points_inside(pose_b, half_b, box_vertices(pose_a, half_a)),
            _points_inside(pose_a, half_a, box_vertices(pose_b, half_b)),
            _clip_edge_points(pose_a, half_a, pose_b, half_b),
            _clip_edge_points(pose_b, half_b, pose_a, half_a),
        ]
    )
    # Clipped edge endpoints can still stick out of the *other* box when the
    # containing interval is empty; keep only points inside both.
    pts = _points_inside(pose_a, half_a, pts, tol=1e-7)
    if len(pts) > 0:
        pts = _points_inside(pose_b, half_b, pts, tol=1e-7)
    if len(pts) < 4:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0  # flat intersection: zero volume


def iou3d(box_a, box_b) -> float:
    """Intersection-over-union of oriented boxes given as (Pose, half_extents)."""
    pose_a, half_a = box_a
    pose_b, half_b = box_b
    inter = box_intersection_volume(pose_a, half_a, pose_b, half_b)
    vol_a = 8.0 * float(np.prod(half_a))
    vol_b = 8.0 * float(np.prod(half_b))
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


def object_box(pose: Pose, semiaxes):
    """Oriented box enclosing an ellipsoid: full extents are 2u."""
    return pose, np.asarray(semiaxes, dtype=float)


def _rotation_error_deg(r_est, r_gt):
    return float(np.rad2deg(np.linalg.norm(so3_log(r_est.T @ r_gt))))


def precision_recall(est_objects, gt_objects, rot_thresholds_deg=(30.0, 45.0, None),
                     trans_thresholds=(0.5, 1.0, 1.5)):
    """True-positive table over rotation/translation threshold grids.

    Objects are ``(Pose, semiaxes)`` pairs.  An estimate is a true positive
    when its closest ground-truth object (by center distance) is within
    both thresholds; a rotation threshold of None ignores orientation.
    Recall counts distinct matched ground-truth objects.
    """
    rows = []
    for rot_t in rot_thresholds_deg:
        for trans_t in trans_thresholds:
            tp = 0
            matched = set()
            for pose_e, _ in est_objects:
                if not gt_objects:
                    continue
                dists = [
                    np.linalg.norm(pose_e.translation - pose_g.translation)
                    for pose_g, _ in gt_objects
                ]
                k = int(np.argmin(dists))
                pose_g, _ = gt_objects[k]
                ok = dists[k] <= trans_t
                if ok and rot_t is not None:
                    ok = _rotation_error_deg(pose_e.rotation, pose_g.rotation) <= rot_t
                if ok:
                    tp += 1
                    matched.add(k)
            precision = tp / len(est_objects) if est_objects else 0.0
            recall = len(matched) / len(gt_objects) if gt_objects else 0.0
            rows.append(
                {
                    "rotation_deg": rot_t,
                    "translation_m": trans_t,
                    "precision": precision,
                    "recall": recall,
                }
            )
    return rows


def mean_iou(est_objects, gt_objects) -> float:
    """Mean IoU of each estimate against its closest ground-truth object."""
    if not est_objects or not gt_objects:
        return 0.0
    vals = []
    for pose_e, u_e in est_objects:
        dists = [
            np.linalg.norm(pose_e.translation - pose_g.translation)
            for pose_g, _ in gt_objects
        ]
        k = int(np.argmin(dists))
        vals.append(iou3d((pose_e, u_e), gt_objects[k]))
    return float(np.mean(vals))
