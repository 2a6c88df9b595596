"""Dataset and result file formats.

All multi-record files are JSON lines with a leading header record
carrying ``format_version`` and a ``kind`` tag; parsers reject unknown
versions.  Rotations are serialized as row-major 3x3 matrices.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .config import dataclass_from_dict, dataclass_to_dict
from .errors import FormatError
from .lie import Pose
from .msckf import MeasurementFrame, ObjectFrameMeasurement
from .propagation import ImuState, InertialSample
from .residuals import ObjectClass
from .simulate import Dataset, SceneObjectSpec, SceneSpec, TrajectorySpec

FORMAT_VERSION = 1

TRAJECTORY_COLUMNS = (
    "t,r00,r01,r02,r10,r11,r12,r20,r21,r22,"
    "px,py,pz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz"
)


def _write_jsonl(path, kind, records):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION, "kind": kind}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _read_jsonl(path, kind):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:1: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown format_version {header.get('format_version')}")
    if header.get("kind") != kind:
        raise FormatError(f"{path}: kind '{header.get('kind')}' != '{kind}'")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{i}: {exc}") from exc
    return records


def _sample_to_dict(s: InertialSample):
    return {"dt": s.dt, "omega": s.omega.tolist(), "accel": s.accel.tolist()}


def _sample_from_dict(d):
    return InertialSample(np.array(d["omega"]), np.array(d["accel"]), float(d["dt"]))


def _frame_to_dict(frame: MeasurementFrame):
    return {
        "t": frame.t,
        "imu": None if frame.imu is None else _sample_to_dict(frame.imu),
        "keypoints": [{"id": int(i), "uv": np.asarray(z).tolist()} for i, z in frame.keypoints],
        "objects": [
            {
                "id": int(m.instance_id),
                "class": int(m.class_id),
                "lines": [np.asarray(l).tolist() for l in m.lines],
                "keypoints": [
                    {"index": int(i), "uv": np.asarray(z).tolist()} for i, z in m.keypoints
                ],
            }
            for m in frame.objects
        ],
    }


def _frame_from_dict(d):
    return MeasurementFrame(
        t=float(d["t"]),
        imu=None if d["imu"] is None else _sample_from_dict(d["imu"]),
        keypoints=tuple((kp["id"], np.array(kp["uv"])) for kp in d["keypoints"]),
        objects=tuple(
            ObjectFrameMeasurement(
                instance_id=o["id"],
                class_id=o["class"],
                keypoints=tuple((kp["index"], np.array(kp["uv"])) for kp in o["keypoints"]),
                lines=tuple(np.array(l) for l in o["lines"]),
            )
            for o in d["objects"]
        ),
    )


def _class_to_dict(cls: ObjectClass):
    return {
        "semantic_id": cls.semantic_id,
        "mean_landmarks": cls.mean_landmarks.tolist(),
        "mean_semiaxes": cls.mean_semiaxes.tolist(),
    }


def _class_from_dict(d):
    return ObjectClass(
        int(d["semantic_id"]), np.array(d["mean_landmarks"]), np.array(d["mean_semiaxes"])
    )


def save_dataset(ds: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    _write_jsonl(
        os.path.join(out_dir, "imu.jsonl"),
        "imu",
        ({"t": t, **_sample_to_dict(s)} for t, s in ds.imu),
    )
    _write_jsonl(
        os.path.join(out_dir, "frames.jsonl"),
        "frames",
        (_frame_to_dict(f) for f in ds.frames),
    )
    _write_jsonl(
        os.path.join(out_dir, "gt.jsonl"),
        "ground_truth",
        (
            {
                "t": t,
                "rotation": np.asarray(s.rotation).ravel().tolist(),
                "velocity": np.asarray(s.velocity).tolist(),
                "position": np.asarray(s.position).tolist(),
                "bias_gyro": np.asarray(bg).tolist(),
                "bias_accel": np.asarray(ba).tolist(),
            }
            for t, s, bg, ba in ds.truth
        ),
    )
    scene = {
        "format_version": FORMAT_VERSION,
        "trajectory": dataclass_to_dict(ds.spec),
        "scene": dataclass_to_dict(ds.scene),
        "classes": [_class_to_dict(c) for c in ds.classes.values()],
        "landmarks": np.asarray(ds.landmarks).tolist(),
    }
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump(scene, fh, indent=1)


def parse_scene_spec(data: dict) -> SceneSpec:
    import dataclasses

    objects = tuple(
        dataclass_from_dict(SceneObjectSpec, o, "scene.objects")
        for o in data.get("objects", [])
    )
    rest = {k: v for k, v in data.items() if k != "objects"}
    scene = dataclass_from_dict(SceneSpec, rest, "scene")
    return dataclasses.replace(scene, objects=objects)


def load_simulation_spec(path):
    """Parse a simulation spec file into (TrajectorySpec, SceneSpec)."""
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown format_version {data.get('format_version')}")
    traj = dataclass_from_dict(TrajectorySpec, data.get("trajectory", {}), "trajectory")
    scene = parse_scene_spec(data.get("scene", {}))
    return traj, scene


def load_dataset(data_dir):
    """Load a dataset directory into runtime objects.

    Returns a dict with keys: imu [(t, sample)], frames [MeasurementFrame],
    truth [(t, ImuState)], classes {id: ObjectClass}, objects
    [SceneObjectSpec], trajectory spec, scene spec, landmarks.
    """
    imu = [
        (float(r["t"]), _sample_from_dict(r))
        for r in _read_jsonl(os.path.join(data_dir, "imu.jsonl"), "imu")
    ]
    frames = [
        _frame_from_dict(r)
        for r in _read_jsonl(os.path.join(data_dir, "frames.jsonl"), "frames")
    ]
    truth = []
    for r in _read_jsonl(os.path.join(data_dir, "gt.jsonl"), "ground_truth"):
        truth.append(
            (
                float(r["t"]),
                ImuState(
                    rotation=np.array(r["rotation"]).reshape(3, 3),
                    velocity=np.array(r["velocity"]),
                    position=np.array(r["position"]),
                    bias_gyro=np.array(r["bias_gyro"]),
                    bias_accel=np.array(r["bias_accel"]),
                ),
            )
        )
    with open(os.path.join(data_dir, "scene.json")) as fh:
        scene_doc = json.load(fh)
    if scene_doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"scene.json: unknown format_version")
    classes = {c["semantic_id"]: _class_from_dict(c) for c in scene_doc["classes"]}
    scene = parse_scene_spec(scene_doc["scene"])
    traj = dataclass_from_dict(TrajectorySpec, scene_doc["trajectory"], "trajectory")
    return {
        "imu": imu,
        "frames": frames,
        "truth": truth,
        "classes": classes,
        "objects": scene.objects,
        "trajectory": traj,
        "scene": scene,
        "landmarks": np.array(scene_doc["landmarks"]),
    }


def write_trajectory_csv(path, rows):
    """rows: iterable of (t, ImuState)."""
    with open(path, "w") as fh:
        fh.write(f"# format_version {FORMAT_VERSION}\n")
        fh.write(TRAJECTORY_COLUMNS + "\n")
        for t, state in rows:
            vals = np.concatenate(
                [
                    [t],
                    np.asarray(state.rotation).ravel(),
                    state.position,
                    state.velocity,
                    state.bias_gyro,
                    state.bias_accel,
                ]
            )
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def read_trajectory_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# format_version"):
        raise FormatError(f"{path}: missing format header")
    if lines[0].split()[-1] != str(FORMAT_VERSION):
        raise FormatError(f"{path}: unknown format version")
    out = []
    for line in lines[2:]:
        if not line.strip():
            continue
        v = np.array([float(x) for x in line.split(",")])
        state = ImuState(
            rotation=v[1:10].reshape(3, 3),
            velocity=v[13:16],
            position=v[10:13],
            bias_gyro=v[16:19],
            bias_accel=v[19:22],
        )
        out.append((float(v[0]), state))
    return out


def write_objects_json(path, object_map, classes):
    objects = []
    for oid, entry in sorted(object_map.items()):
        inst = entry["instance"]
        cls = classes[entry["class_id"]]
        objects.append(
            {
                "id": int(oid),
                "class": int(entry["class_id"]),
                "rotation": inst.pose.rotation.ravel().tolist(),
                "position": inst.pose.translation.tolist(),
                "semiaxes": inst.semiaxes(cls).tolist(),
                "delta_semiaxes": inst.delta_semiaxes.tolist(),
                "delta_landmarks": inst.delta_landmarks.tolist(),
                "frames": entry["frames"],
                "lm_converged": bool(entry["lm_converged"]),
                "pose_sigma": entry["pose_sigma"],
            }
        )
    with open(path, "w") as fh:
        json.dump({"format_version": FORMAT_VERSION, "objects": objects}, fh, indent=1)


def read_objects_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown format_version")
    out = []
    for o in doc["objects"]:
        out.append(
            {
                "id": o["id"],
                "class": o["class"],
                "pose": Pose(np.array(o["rotation"]).reshape(3, 3), np.array(o["position"])),
                "semiaxes": np.array(o["semiaxes"]),
            }
        )
    return out


def write_events_jsonl(path, events):
    _write_jsonl(path, "events", (ev.to_dict() for ev in events))
