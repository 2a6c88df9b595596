"""Command-line entry points: simulate, run, eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import dataio
from .config import RunConfig, dataclass_to_dict, load_run_config
from .lie import Pose
from .metrics import (
    DEFAULT_TE_DISTANCES,
    align_to_first,
    mean_iou,
    object_box,
    precision_recall,
    rmse,
    translation_error,
)
from .msckf import Filter
from .simulate import simulate_dataset

logger = logging.getLogger("semvio")


def cmd_simulate(args):
    traj, scene = dataio.load_simulation_spec(args.spec)
    ds = simulate_dataset(traj, scene)
    dataio.save_dataset(ds, args.out)
    logger.info(
        "wrote %d frames, %d IMU samples to %s", len(ds.frames), len(ds.imu), args.out
    )
    return 0


def run_filter(dataset, config: RunConfig, debug=False):
    """Drive the filter over a loaded dataset.

    Returns ``(trajectory rows [(t, ImuState)], filter)``.
    """
    _, init = dataset["truth"][0]
    flt = Filter(config, dataset["classes"], init, debug=debug)
    imu_iter = iter(dataset["imu"])
    pending = next(imu_iter, None)
    rows, events = [], []
    for frame in dataset["frames"]:
        while pending is not None and pending[0] < frame.t - 1e-9:
            flt.ingest_imu(*pending)
            pending = next(imu_iter, None)
        events.extend(flt.process_frame(frame))
        rows.append((frame.t, flt.state.imu))
    return rows, flt, events


def cmd_run(args):
    dataset = dataio.load_dataset(args.data)
    if args.config:
        with open(args.config) as fh:
            config = load_run_config(json.load(fh))
    else:
        config = RunConfig()
    os.makedirs(args.out, exist_ok=True)
    # Resolved configuration is written out for provenance.
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(dataclass_to_dict(config), fh, indent=1)
    rows, flt, events = run_filter(dataset, config)
    dataio.write_trajectory_csv(os.path.join(args.out, "trajectory.csv"), rows)
    dataio.write_objects_json(
        os.path.join(args.out, "objects.json"), flt.object_map, dataset["classes"]
    )
    dataio.write_events_jsonl(os.path.join(args.out, "events.jsonl"), events)
    logger.info("wrote %d trajectory rows, %d mapped objects, %d events",
                len(rows), len(flt.object_map), len(events))
    return 0


def evaluate(truth, est_rows, gt_objects, est_objects, te_distances=DEFAULT_TE_DISTANCES):
    """Metrics dict plus per-frame aligned position errors.

    Trajectories are intersected on timestamps before evaluation.
    """
    gt_by_t = {round(t, 9): s for t, s in truth}
    est_by_t = {round(t, 9): s for t, s in est_rows}
    common = sorted(set(gt_by_t) & set(est_by_t))
    if len(common) != len(truth) or len(common) != len(est_rows):
        logger.warning(
            "timestamp mismatch: %d gt, %d est, %d common poses",
            len(truth), len(est_rows), len(common),
        )
    gt_poses = [Pose(gt_by_t[t].rotation, gt_by_t[t].position) for t in common]
    est_poses = [Pose(est_by_t[t].rotation, est_by_t[t].position) for t in common]

    errors = [
        g.inverse().compose(e).translation
        for g, e in zip(gt_poses, align_to_first(gt_poses, est_poses))
    ]
    metrics = {
        "format_version": dataio.FORMAT_VERSION,
        "rmse_m": rmse(gt_poses, est_poses),
        "te_percent": translation_error(gt_poses, est_poses, te_distances),
        "te_distances_m": list(te_distances),
        "poses_evaluated": len(common),
    }
    if gt_objects:
        metrics["mean_iou"] = mean_iou(est_objects, gt_objects)
        metrics["precision_recall"] = precision_recall(est_objects, gt_objects)
        metrics["objects_estimated"] = len(est_objects)
        metrics["objects_ground_truth"] = len(gt_objects)
    return metrics, list(zip(common, errors))


def cmd_eval(args):
    dataset = dataio.load_dataset(args.gt)
    est_rows = dataio.read_trajectory_csv(os.path.join(args.run, "trajectory.csv"))
    est_raw = dataio.read_objects_json(os.path.join(args.run, "objects.json"))
    classes = dataset["classes"]
    gt_objects = [
        object_box(spec.instance(classes[spec.class_id]).pose,
                   spec.instance(classes[spec.class_id]).semiaxes(classes[spec.class_id]))
        for spec in dataset["objects"]
    ]
    est_objects = [object_box(o["pose"], o["semiaxes"]) for o in est_raw]
    truth = [(t, s) for t, s in dataset["truth"]]
    metrics, errors = evaluate(truth, est_rows, gt_objects, est_objects)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=1)
    with open(os.path.join(args.out, "error_vs_time.csv"), "w") as fh:
        fh.write(f"# format_version {dataio.FORMAT_VERSION}\n")
        fh.write("t,ex,ey,ez,norm\n")
        for t, e in errors:
            fh.write(
                f"{t!r},{e[0]!r},{e[1]!r},{e[2]!r},{np.linalg.norm(e)!r}\n"
            )
    logger.info("RMSE %.4g m, TE %.4g %%", metrics["rmse_m"], metrics["te_percent"])
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semvio",
        description="Visual-inertial odometry with object mapping on synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--spec", required=True, help="simulation spec JSON file")
    p_sim.add_argument("--out", required=True, help="output dataset directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_run = sub.add_parser("run", help="run the estimator over a dataset")
    p_run.add_argument("--data", required=True, help="dataset directory")
    p_run.add_argument("--config", default=None, help="run config JSON file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a run against ground truth")
    p_eval.add_argument("--gt", required=True, help="dataset directory with gt.jsonl")
    p_eval.add_argument("--run", required=True, help="run output directory")
    p_eval.add_argument("--out", required=True, help="metrics output directory")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("SEMVIO_LOG_LEVEL", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
