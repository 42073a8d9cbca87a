"""Command line entry point: ``hiepose <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 missing file, 4 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .config import PipelineConfig, load_config
from .errors import HieposeError, InvalidInputError, MissingInputError
from .formats import (frame_paths, read_detections, read_frame_rgb, read_poses, write_detections,
                      write_jsonl, write_poses, write_ppm)
from .posenms import OksParams
from .render import render_overlay
from .synth import VideoSpec, crossing_spec, synth_detections, synth_video

log = logging.getLogger("hiepose")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="hiepose", parents=[common],
                                     description="Post-processing for top-down video pose estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", parents=[common], help="fuse heatmap views and decode poses")
    p.add_argument("--detections", required=True, help="detections JSONL with heatmap references")
    p.add_argument("--out", required=True)
    p.add_argument("--no-flip-shift", action="store_true")

    p = sub.add_parser("detnms", parents=[common], help="model fusion and (Set) NMS on boxes")
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float, help="NMS IoU threshold (default 0.5)")
    p.add_argument("--fusion-iou", type=float, help="fusion clustering IoU (default 0.55)")
    p.add_argument("--plain-nms", action="store_true", help="disable the same-proposal exemption")

    p = sub.add_parser("posenms", parents=[common], help="OKS pose NMS")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oks-threshold", type=float)
    p.add_argument("--min-score", type=float)

    p = sub.add_parser("track", parents=[common], help="assign track ids")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--detections")
    src.add_argument("--poses")
    p.add_argument("--out", required=True)
    p.add_argument("--sim-threshold", type=float)
    p.add_argument("--iou-weight", type=float)

    p = sub.add_parser("smooth", parents=[common], help="optical-flow temporal smoothing")
    p.add_argument("--poses", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--smooth-conf", type=float)
    p.add_argument("--passes", type=int)
    p.add_argument("--per-joint", action="store_true", help="per-joint flow-failure gating")
    p.add_argument("--flow-dump", help="write per-joint flow vectors as JSONL")

    p = sub.add_parser("eval", parents=[common], help="AP / weighted AP / MMR")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--task", choices=("kp", "det"), default="kp")
    p.add_argument("--weights")
    p.add_argument("--report", required=True)
    p.add_argument("--oks-thresholds", type=float, nargs="+")
    p.add_argument("--iou-threshold", type=float)

    p = sub.add_parser("overlay", parents=[common], help="draw poses and boxes on a frame")
    p.add_argument("--frames", required=True, help="frame directory")
    p.add_argument("--frame-index", type=int, required=True)
    p.add_argument("--poses")
    p.add_argument("--detections")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic video")
    p.add_argument("--spec", help="video spec JSON; default is a crossing scene")
    p.add_argument("--persons", type=int, default=3)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--models", type=int, default=2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", parents=[common], help="run the configured pipeline")
    p.add_argument("--out-dir", help="override paths.out_dir")
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise InvalidInputError("--threads must be >= 1")
        cfg.threads = args.threads
    return cfg


def _override(section, **values):
    return replace(section, **{k: v for k, v in values.items() if v is not None})


def cmd_fuse(args, cfg):
    if args.no_flip_shift:
        cfg.fusion = replace(cfg.fusion, flip_shift=False)
    src = Path(args.detections)
    poses = pl.fuse_stage(read_detections(src), src.parent, cfg)
    write_poses(args.out, poses, cfg.skeleton.joints)


def cmd_detnms(args, cfg):
    cfg.fusion = _override(cfg.fusion, nms_iou_threshold=args.iou, iou_threshold=args.fusion_iou)
    if args.plain_nms:
        cfg.fusion = replace(cfg.fusion, set_nms=False)
    write_detections(args.out, pl.detpost_stage(read_detections(args.detections), cfg))


def cmd_posenms(args, cfg):
    cfg.pose_nms = _override(cfg.pose_nms, oks_threshold=args.oks_threshold, min_score=args.min_score)
    joints, poses = read_poses(args.poses)
    params = None
    if joints != cfg.skeleton.joints:
        if cfg.pose_nms.sigmas is not None:
            raise InvalidInputError(
                f"{args.poses}: {joints} joints, configured skeleton has {cfg.skeleton.joints}")
        params = OksParams.uniform(joints, cfg.pose_nms.sigma,
                                   visibility_threshold=cfg.pose_nms.visibility_threshold)
    write_poses(args.out, pl.posenms_stage(poses, cfg, params), joints)


def cmd_track(args, cfg):
    cfg.tracking = _override(cfg.tracking, sim_threshold=args.sim_threshold, iou_weight=args.iou_weight)
    if args.detections:
        write_detections(args.out, pl.track_detections(read_detections(args.detections), cfg))
    else:
        joints, poses = read_poses(args.poses)
        write_poses(args.out, pl.track_stage(poses, cfg), joints)


def cmd_smooth(args, cfg):
    cfg.smoothing = _override(cfg.smoothing, alpha=args.alpha,
                              confidence_threshold=args.smooth_conf, passes=args.passes)
    if args.per_joint:
        cfg.smoothing = replace(cfg.smoothing, per_joint_gating=True)
    joints, poses = read_poses(args.poses)
    flow_log = [] if args.flow_dump else None
    out = pl.smooth_stage(poses, args.frames, cfg, flow_log)
    write_poses(args.out, out, joints)
    if args.flow_dump:
        write_jsonl(args.flow_dump, flow_log)


def cmd_eval(args, cfg):
    cfg.eval = _override(cfg.eval, oks_thresholds=args.oks_thresholds, iou_threshold=args.iou_threshold)
    report = pl.eval_files(args.pred, args.gt, args.task, cfg, args.weights)
    pl.write_report(args.report, report)
    print(json.dumps({"weighted_ap": report.weighted_ap, "mmr": report.mmr}))


def cmd_overlay(args, cfg):
    paths = frame_paths(args.frames)
    if args.frame_index not in paths:
        raise MissingInputError(f"no frame {args.frame_index} in {args.frames}")
    poses, boxes = [], []
    if args.poses:
        _, allp = read_poses(args.poses)
        poses = [p for p in allp if p.frame == args.frame_index]
    if args.detections:
        boxes = [b for b in read_detections(args.detections) if b.frame == args.frame_index]
    img = render_overlay(read_frame_rgb(paths[args.frame_index]), poses, boxes, cfg.skeleton)
    write_ppm(args.out, img)


def cmd_synth(args, cfg):
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise MissingInputError(f"{spec_path}: spec not found")
        try:
            spec = VideoSpec.from_dict(json.loads(spec_path.read_text()))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise InvalidInputError(f"{spec_path}: bad video spec ({exc})") from None
    else:
        spec = crossing_spec(args.persons, args.frames, seed=cfg.seed)
    video = synth_video(spec)
    out = Path(args.out)
    video.write(out, cfg.skeleton)
    if args.models > 0:
        write_detections(out / "detections.jsonl",
                         synth_detections(video, models=args.models, seed=cfg.seed))


COMMANDS = {"fuse": cmd_fuse, "detnms": cmd_detnms, "posenms": cmd_posenms, "track": cmd_track,
            "smooth": cmd_smooth, "eval": cmd_eval, "overlay": cmd_overlay, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "run":
            if args.out_dir:
                cfg.paths.out_dir = args.out_dir
            outputs = pl.run_pipeline(cfg)
            for stage, path in outputs.items():
                print(f"{stage}\t{path}")
        else:
            COMMANDS[args.command](args, cfg)
    except HieposeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
