"""Stage functions and the file-chained pipeline runner.

Each stage reads and writes the JSONL formats in :mod:`hiepose.formats`, so
any intermediate can be inspected or fed to a single CLI subcommand.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .boxes import nms, set_nms, weighted_box_fusion
from .config import PipelineConfig
from .errors import HieposeError, InvalidInputError, MissingInputError
from .flow import PyramidParams
from .formats import (frame_paths, read_detections, read_frame, read_poses, write_detections,
                      write_jsonl, write_poses)
from .heatmap import decode_keypoints, fuse_views, heatmap_transform_for_box, load_heatmap
from .metrics import (DEFAULT_OKS_THRESHOLDS, EvalReport, average_precision, box_matches,
                      keypoint_matches, log_average_miss_rate, miss_rate_curve, weighted_ap)
from .posenms import OksParams, pose_nms
from .structures import DetectionBox, Pose
from .synth import attach_oracle_heatmaps
from .tracking import FrameSource, Instance, SmoothingParams, build_tracks, smooth_video

log = logging.getLogger(__name__)

STAGE_OUTPUTS = {
    "detpost": "detections_post.jsonl",
    "fuse": "poses_decoded.jsonl",
    "posenms": "poses_nms.jsonl",
    "track": "poses_tracked.jsonl",
    "smooth": "poses_smoothed.jsonl",
    "eval": "report.json",
}


class StageError(HieposeError):
    def __init__(self, stage: str, cause: Exception, frame=None):
        where = f" (frame {frame})" if frame is not None else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage = stage
        self.frame = frame
        self.exit_code = getattr(cause, "exit_code", 4)


def _group(items, key):
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


def _video_key(v):
    return "" if v is None else v


def oks_params(config: PipelineConfig) -> OksParams:
    pn = config.pose_nms
    sig = pn.sigmas if pn.sigmas is not None else [pn.sigma] * config.skeleton.joints
    return OksParams(tuple(sig), visibility_threshold=pn.visibility_threshold)


def smoothing_params(config: PipelineConfig):
    s = config.smoothing
    return (SmoothingParams(s.alpha, s.confidence_threshold, s.per_joint_gating),
            PyramidParams(s.levels, s.window_radius, s.max_iterations, s.epsilon, s.min_eigenvalue))


# -- stages ------------------------------------------------------------------------

def detpost_stage(boxes: Sequence[DetectionBox], config: PipelineConfig) -> List[DetectionBox]:
    """Per frame: weighted fusion across models, then (Set) NMS."""
    fc = config.fusion
    model_ids = sorted({b.model_id for b in boxes if b.model_id is not None}
                       | {int(k) for k in fc.model_weights})
    suppress = set_nms if fc.set_nms else nms
    out = []
    groups = _group(boxes, lambda b: (_video_key(b.video), b.frame))
    for key in sorted(groups):
        frame_boxes = groups[key]
        if len(model_ids) > 1:
            outputs = [(float(fc.model_weights.get(str(m), 1.0)),
                        [b for b in frame_boxes if b.model_id == m]) for m in model_ids]
            stray = [b for b in frame_boxes if b.model_id is None]
            if stray:
                raise InvalidInputError(
                    f"frame {key[1]}: boxes without model_id in a multi-model file")
            frame_boxes = weighted_box_fusion(outputs, fc.iou_threshold)
            for b in frame_boxes:
                b.frame, b.video = key[1], groups[key][0].video
        out.extend(suppress(frame_boxes, fc.nms_iou_threshold))
    return out


def decode_instance(box: DetectionBox, base_dir: Path, config: PipelineConfig) -> Pose:
    if not box.heatmaps:
        raise InvalidInputError(f"frame {box.frame}: detection has no heatmap references")
    c = config.crop
    views = []
    for ref in box.heatmaps:
        path = Path(ref["path"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise MissingInputError(f"frame {box.frame}: heatmap file {path} not found")
        hm = load_heatmap(path, ref.get("index", 0))
        if hm.joints != config.skeleton.joints:
            raise InvalidInputError(
                f"frame {box.frame}: heatmap has {hm.joints} joints, skeleton has {config.skeleton.joints}")
        views.append((hm, bool(ref.get("flip", False)), float(ref.get("weight", 1.0))))
    ref_tf = heatmap_transform_for_box(box, c.heatmap_width, c.heatmap_height, c.width, c.height,
                                       c.aspect[0], c.aspect[1], scale=1.0)
    fused = fuse_views(views, ref_tf, c.heatmap_height, c.heatmap_width,
                       config.skeleton.flip_pairs, shift=config.fusion.flip_shift)
    pose = decode_keypoints(fused)
    pose.frame, pose.video, pose.track_id = box.frame, box.video, box.track_id
    pose.box = box.copy(heatmaps=[], feature=None)
    pose.feature = box.feature
    return pose


def fuse_stage(boxes: Sequence[DetectionBox], base_dir, config: PipelineConfig) -> List[Pose]:
    base_dir = Path(base_dir)

    def work(b):
        try:
            return decode_instance(b, base_dir, config)
        except HieposeError as exc:
            raise StageError("fuse", exc, b.frame) from exc

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(work, boxes))
    return [work(b) for b in boxes]


def posenms_stage(poses: Sequence[Pose], config: PipelineConfig,
                  params: Optional[OksParams] = None) -> List[Pose]:
    params = params or oks_params(config)
    pn = config.pose_nms
    out = []
    groups = _group(poses, lambda p: (_video_key(p.video), p.frame))
    for key in sorted(groups):
        out.extend(pose_nms(groups[key], pn.oks_threshold, pn.min_score, params))
    return out


def track_stage(poses: Sequence[Pose], config: PipelineConfig) -> List[Pose]:
    """Assign track ids per video, ignoring any ids already present."""
    tc = config.tracking
    out = [p.copy() for p in poses]
    by_video = _group(range(len(out)), lambda i: _video_key(out[i].video))
    next_id = 0
    for video in sorted(by_video):
        idx = by_video[video]
        frames = sorted({out[i].frame for i in idx})
        first, last = frames[0], frames[-1]
        slots: List[List[int]] = [[] for _ in range(last - first + 1)]
        for i in idx:
            slots[out[i].frame - first].append(i)
        insts = [[Instance(out[i].box, out[i], out[i].feature) for i in s] for s in slots]
        _, ids = build_tracks(insts, tc.sim_threshold, tc.iou_weight, first_frame=first)
        for s, sid in zip(slots, ids):
            for i, tid in zip(s, sid):
                out[i].track_id = next_id + tid
        next_id += 1 + max((t for sid in ids for t in sid), default=-1)
    return out


def track_detections(boxes: Sequence[DetectionBox], config: PipelineConfig) -> List[DetectionBox]:
    tc = config.tracking
    out = [b.copy() for b in boxes]
    by_video = _group(range(len(out)), lambda i: _video_key(out[i].video))
    next_id = 0
    for video in sorted(by_video):
        idx = by_video[video]
        frames = sorted({out[i].frame for i in idx})
        first = frames[0]
        slots: List[List[int]] = [[] for _ in range(frames[-1] - first + 1)]
        for i in idx:
            slots[out[i].frame - first].append(i)
        insts = [[Instance(out[i], None, out[i].feature) for i in s] for s in slots]
        _, ids = build_tracks(insts, tc.sim_threshold, tc.iou_weight, first_frame=first)
        for s, sid in zip(slots, ids):
            for i, tid in zip(s, sid):
                out[i].track_id = next_id + tid
        next_id += 1 + max((t for sid in ids for t in sid), default=-1)
    return out


def frame_source(frames_dir, video: Optional[str], levels: int, multi: bool) -> FrameSource:
    root = Path(frames_dir)
    if multi and video:
        root = root / video
    paths = frame_paths(root)
    return FrameSource(lambda k: read_frame(paths[k]), set(paths), levels)


def smooth_stage(poses: Sequence[Pose], frames_dir, config: PipelineConfig,
                 flow_log: Optional[list] = None) -> List[Pose]:
    sp, fp = smoothing_params(config)
    out: List[Optional[Pose]] = [None] * len(poses)
    by_video = _group(range(len(poses)), lambda i: _video_key(poses[i].video))
    multi = len(by_video) > 1
    for video in sorted(by_video):
        idx = by_video[video]
        src = frame_source(frames_dir, video, fp.levels, multi)
        smoothed = smooth_video([poses[i] for i in idx], src, sp, fp,
                                passes=config.smoothing.passes,
                                sim_threshold=config.tracking.sim_threshold,
                                iou_weight=config.tracking.iou_weight,
                                threads=config.threads, flow_log=flow_log)
        for i, p in zip(idx, smoothed):
            out[i] = p
    return out


def _load_weights(path) -> Dict[str, float]:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{p}: weights file not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{p}: malformed weights ({exc.msg})") from None
    if not isinstance(data, dict):
        raise InvalidInputError(f"{p}: weights must map video name to weight")
    return {str(k): float(v) for k, v in data.items()}


def evaluate(pred, gt, task: str = "kp", weights: Optional[Dict[str, float]] = None,
             oks_thresholds: Sequence[float] = DEFAULT_OKS_THRESHOLDS,
             iou_threshold: float = 0.5, params: Optional[OksParams] = None) -> EvalReport:
    """Per-video AP plus the weighted average (and MMR for boxes).

    Videos are weighted by their ground-truth frame count unless ``weights``
    names them. ``tp/fp/fn`` are counted at the first OKS threshold (keypoints)
    or at ``iou_threshold`` (boxes).
    """
    from .metrics import keypoint_ap

    weights = weights or {}
    report = EvalReport()
    pv = _group(pred, lambda x: _video_key(x.video))
    gv = _group(gt, lambda x: _video_key(x.video))
    per_video = {}
    all_curves = []
    for video in sorted(set(pv) | set(gv)):
        P, G = pv.get(video, []), gv.get(video, [])
        if task == "kp":
            if params is None and (P or G):
                params = OksParams.uniform((P or G)[0].num_joints)
            ap = keypoint_ap(P, G, oks_thresholds, params)
            _, tp = keypoint_matches(P, G, oks_thresholds[0], params) if P else (None, np.zeros(0, bool))
        else:
            scores, tp = box_matches(P, G, iou_threshold)
            order = np.argsort(-scores, kind="stable")
            ap = average_precision(tp[order], len(G), scores[order])
        n_tp = int(np.sum(tp))
        name = video or "default"
        report.videos[name] = {"ap": float(ap), "tp": n_tp, "fp": int(len(P) - n_tp),
                               "fn": int(len(G) - n_tp)}
        n_frames = len({g.frame for g in G}) or len({p.frame for p in P}) or 1
        per_video[name] = (float(ap), float(weights.get(name, n_frames)))
        if task == "det" and G:
            all_curves.append((P, G, n_frames))
    report.weighted_ap = weighted_ap(per_video) if per_video else 1.0
    if task == "det" and all_curves:
        P = [b for c in all_curves for b in c[0]]
        G = [b for c in all_curves for b in c[1]]
        # frames are keyed per video so identical frame numbers do not collide
        keyed_p = [b.copy(frame=(_video_key(b.video), b.frame)) for b in P]
        keyed_g = [b.copy(frame=(_video_key(b.video), b.frame)) for b in G]
        curve = miss_rate_curve(keyed_p, keyed_g, sum(c[2] for c in all_curves), iou_threshold)
        report.mmr = log_average_miss_rate(curve)
    return report


def write_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def eval_files(pred_path, gt_path, task: str, config: PipelineConfig,
               weights_path=None) -> EvalReport:
    weights = _load_weights(weights_path)
    thresholds = tuple(config.eval.oks_thresholds or DEFAULT_OKS_THRESHOLDS)
    if task == "kp":
        jp, pred = read_poses(pred_path)
        jg, gt = read_poses(gt_path)
        if jp != jg:
            raise InvalidInputError(f"skeleton mismatch: {jp} vs {jg} joints")
        params = oks_params(config) if jp == config.skeleton.joints else OksParams.uniform(jp)
        return evaluate(pred, gt, "kp", weights, thresholds, config.eval.iou_threshold, params)
    pred = read_detections(pred_path)
    gt = read_detections(gt_path)
    return evaluate(pred, gt, "det", weights, thresholds, config.eval.iou_threshold)


# -- runner ---------------------------------------------------------------------------

def run_pipeline(config: PipelineConfig) -> Dict[str, Path]:
    """Run the configured stages in order, writing every stage's output.

    Returns stage name -> output path. A failing stage raises
    :class:`StageError`; outputs of earlier stages stay on disk.
    """
    config.validate(check_paths=True)
    out_dir = Path(config.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    joints = config.skeleton.joints
    outputs: Dict[str, Path] = {}
    boxes: Optional[List[DetectionBox]] = None
    boxes_dir: Optional[Path] = None
    poses: Optional[List[Pose]] = None
    pose_path: Optional[Path] = None

    def need(value, what):
        if value is None:
            raise MissingInputError(f"no input for {what}: set paths.{what} or enable the previous stage")
        return value

    for stage in config.stages:
        target = out_dir / STAGE_OUTPUTS[stage]
        log.info("stage %s -> %s", stage, target)
        try:
            if stage == "detpost":
                src = need(config.paths.detections, "detections")
                write_detections(target, detpost_stage(read_detections(src), config))
                # later stages see exactly what was written, as a stage command would
                boxes, boxes_dir = read_detections(target), out_dir
            elif stage == "fuse":
                if boxes is None:
                    src = Path(need(config.paths.detections, "detections"))
                    boxes, boxes_dir = read_detections(src), src.parent
                if config.estimator.kind == "synthetic":
                    _, gt = read_poses(need(config.estimator.gt or config.paths.gt, "gt"))
                    boxes = attach_oracle_heatmaps(boxes, gt, config, out_dir / "heatmaps",
                                                   config.estimator.sigma, config.estimator.min_iou)
                    for b in boxes:
                        b.heatmaps = [dict(r, path=f"heatmaps/{r['path']}") for r in b.heatmaps]
                    boxes_dir = out_dir
                    write_detections(out_dir / "detections_heatmaps.jsonl", boxes)
                    boxes = read_detections(out_dir / "detections_heatmaps.jsonl")
                poses = fuse_stage(boxes, boxes_dir, config)
            elif stage in ("posenms", "track", "smooth"):
                if poses is None:
                    src = need(config.paths.poses, "poses")
                    jf, poses = read_poses(src)
                    if jf != joints:
                        raise InvalidInputError(f"{src}: {jf} joints, skeleton has {joints}")
                if stage == "posenms":
                    poses = posenms_stage(poses, config)
                elif stage == "track":
                    poses = track_stage(poses, config)
                else:
                    flow_log: list = []
                    poses = smooth_stage(poses, need(config.paths.frames, "frames"), config, flow_log)
                    write_jsonl(out_dir / "flow_debug.jsonl", flow_log)
            elif stage == "eval":
                pred = pose_path or config.paths.pred
                if config.eval.task == "det" and stage != config.stages[0] and boxes is not None:
                    pred = outputs.get("detpost", pred)
                report = eval_files(need(pred, "pred"), need(config.paths.gt, "gt"),
                                    config.eval.task, config, config.eval.weights)
                write_report(target, report)
            if stage in ("fuse", "posenms", "track", "smooth"):
                write_poses(target, poses, joints)
                _, poses = read_poses(target)
                pose_path = target
        except StageError:
            raise
        except HieposeError as exc:
            raise StageError(stage, exc) from exc
        except (OSError, ValueError) as exc:
            raise StageError(stage, exc) from exc
        outputs[stage] = target
    return outputs
