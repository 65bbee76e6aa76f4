"""Command-line front end: one subcommand per pipeline capability."""

from __future__ import annotations

import argparse
import json
import sys

from . import calib, geom3, graspdb, handeye, pipeline, register
from .cloud import load_ply, save_ply


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config(path):
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as f:
            return tomllib.load(f)
    return _load_json(path)


def _views_from_file(path):
    data = _load_json(path)
    board = data.get("board")
    obj_default = None
    if board:
        obj_default = calib.board_object_points(board["cols"], board["rows"],
                                                board["square_size_m"])
    views = []
    for v in data["views"]:
        if "object" in v:
            import numpy as np
            obj = np.asarray(v["object"], dtype=float)
        elif obj_default is not None:
            obj = obj_default
        else:
            raise SystemExit("view lacks 'object' points and no 'board' spec given")
        views.append(calib.PlanarView(obj, v["image"]))
    return views


def cmd_calibrate(args):
    views = _views_from_file(args.views)
    k, poses, rms = calib.calibrate_planar(views)
    _write_json(args.out, {"intrinsics": k.to_dict(),
                           "view_poses": [geom3.pose_to_dict(p) for p in poses],
                           "rms_px": rms,
                           "views": len(views)})
    print(f"calibrated {len(views)} views, rms {rms:.6g} px")
    return 0


def cmd_handeye(args):
    stations = [handeye.StationSample.from_dict(d) for d in _load_json(args.stations)]
    result = handeye.calibrate_eye_to_hand(stations, all_pairs=args.all_pairs)
    _write_json(args.out, result.to_dict())
    print(f"solved {len(stations)} stations, residuals "
          f"{result.rot_residual:.3e} rad / {result.trans_residual:.3e} m")
    return 0


def cmd_register(args):
    import os
    db = graspdb.load_db(args.db) if os.path.exists(args.db) else graspdb.GraspDatabase()
    cloud = load_ply(args.cloud)
    grasp = geom3.pose_from_dict(_load_json(args.grasp))
    face_id = graspdb.register_face(db, args.object, cloud, grasp, args.gripper)
    graspdb.save_db(db, args.db)
    print(f"registered {face_id} ({len(cloud)} points)")
    return 0


def _icp_params(path):
    return register.IcpParams.from_dict(_load_json(path)) if path else register.IcpParams()


def cmd_match(args):
    db = graspdb.load_db(args.db)
    scanned = load_ply(args.scanned)
    try:
        result = graspdb.match_object(db, scanned, _icp_params(args.params),
                                      args.threshold)
    except graspdb.NoMatch as err:
        _write_json(args.out, {"matched": False, "error": str(err)})
        print(f"no match: {err}")
        return 1
    _write_json(args.out, {"matched": True, **result.to_dict()})
    print(f"matched {result.face_id}, fitness {result.alignment.fitness:.3f}")
    return 0


def cmd_align(args):
    registered = load_ply(args.registered)
    scanned = load_ply(args.scanned)
    result = register.align_object(registered, scanned, _icp_params(args.params))
    _write_json(args.out, result.to_dict())
    print(f"aligned: fitness {result.fitness:.3f}, rmse {result.inlier_rmse:.6g} m, "
          f"{result.iterations} iterations")
    return 0


def cmd_plan(args):
    grasp = geom3.pose_from_dict(_load_json(args.grasp))
    place = geom3.pose_from_dict(_load_json(args.place))
    plan = pipeline.plan_pick_place(grasp, place, args.offset)
    _write_json(args.out, plan.to_dict())
    print(f"planned {len(plan.waypoints)} waypoints")
    return 0


def cmd_simulate(args):
    spec_data = _load_json(args.spec)
    shape = spec_data["shape"]
    spec = pipeline.ShapeSpec(shape["kind"], tuple(shape["dims"]),
                              shape.get("density", 80000.0))
    cloud = pipeline.synth_cloud(spec, args.seed)
    view_data = spec_data.get("view")
    if view_data:
        view = pipeline.ViewSpec(
            geom3.pose_from_dict(view_data["object_pose"]),
            geom3.pose_from_dict(view_data["camera_pose"]),
            view_data.get("noise_sigma", 0.0),
            view_data.get("visibility", "camera_facing"),
            view_data.get("seed", args.seed))
        cloud = pipeline.simulate_view(cloud, view)
    save_ply(cloud, args.out, binary=args.binary)
    print(f"wrote {len(cloud)} points to {args.out}")
    return 0


def cmd_run(args):
    config = _load_config(args.config) if args.config else {}
    if args.seed is not None:
        config["seed"] = args.seed
    try:
        report = pipeline.run_pipeline(config)
    except pipeline.PipelineStageError as err:
        _write_json(args.out, err.report)
        print(f"pipeline failed in stage {err.stage}: {err.cause}", file=sys.stderr)
        return 2
    _write_json(args.out, report)
    s = report["summary"]
    print(f"scenes planned {s['scenes_planned']}/{s['scenes_total']}")
    return 0 if s["all_scenes_planned"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vispick",
                                     description="vision-guided pick-and-place toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="planar intrinsic calibration from correspondences")
    p.add_argument("--views", required=True, help="JSON correspondence file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("handeye", help="eye-to-hand calibration from station file")
    p.add_argument("--stations", required=True, help="JSON station file")
    p.add_argument("--out", required=True)
    p.add_argument("--all-pairs", action="store_true",
                   help="use every station pair instead of consecutive ones")
    p.set_defaults(func=cmd_handeye)

    p = sub.add_parser("register", help="teach one object face")
    p.add_argument("--db", required=True)
    p.add_argument("--object", required=True)
    p.add_argument("--cloud", required=True, help="segmented PLY in robot_base")
    p.add_argument("--grasp", required=True, help="grasp pose JSON")
    p.add_argument("--gripper", choices=graspdb.GRIPPER_TYPES, default="two_finger")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("match", help="match a scanned cloud against the database")
    p.add_argument("--db", required=True)
    p.add_argument("--scanned", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="IcpParams JSON")
    p.add_argument("--threshold", type=float, default=graspdb.DEFAULT_ACCEPT_THRESHOLD)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("align", help="align a registered cloud onto a scanned cloud")
    p.add_argument("--registered", required=True)
    p.add_argument("--scanned", required=True)
    p.add_argument("--params", help="IcpParams JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("plan", help="emit pick-and-place waypoints")
    p.add_argument("--grasp", required=True, help="grasp pose JSON")
    p.add_argument("--place", required=True, help="place pose JSON")
    p.add_argument("--offset", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="generate a synthetic cloud or view")
    p.add_argument("--spec", required=True, help="JSON shape/view spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="end-to-end simulated pipeline")
    p.add_argument("--config", help="TOML or JSON config; demo defaults if omitted")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
