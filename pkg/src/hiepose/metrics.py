"""Evaluation: greedy matching, AP, keypoint AP, weighted AP and MMR."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou
from .errors import InvalidInputError
from .posenms import OksParams, oks, pose_area
from .structures import DetectionBox, Pose

DEFAULT_OKS_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
DEFAULT_FPPI_RANGE = (0.01, 100.0)
DEFAULT_MMR_POINTS = 9


@dataclass
class MatchResult:
    matches: List[Tuple[int, int]]
    false_positives: List[int]
    false_negatives: List[int]


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray


@dataclass
class EvalReport:
    videos: Dict[str, dict] = field(default_factory=dict)
    weighted_ap: float = 0.0
    mmr: Optional[float] = None

    def to_json(self) -> dict:
        return {"videos": self.videos, "weighted_ap": self.weighted_ap, "mmr": self.mmr}


def match_greedy(scores: Sequence[float], n_gt: int, similarity: Callable[[int, int], float],
                 threshold: float) -> MatchResult:
    """Highest-scoring predictions claim their most similar free ground truth.

    ``similarity(p, g)`` gives the similarity of prediction ``p`` to ground
    truth ``g``; a claim needs similarity >= ``threshold``. Equal scores keep
    input order and equal similarities go to the lower ground-truth index.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    taken = np.zeros(n_gt, dtype=bool)
    matches, fps = [], []
    for p in order:
        best, best_sim = -1, -np.inf
        for g in range(n_gt):
            if taken[g]:
                continue
            s = similarity(int(p), g)
            if s >= threshold and s > best_sim:
                best, best_sim = g, s
        if best >= 0:
            taken[best] = True
            matches.append((int(p), best))
        else:
            fps.append(int(p))
    return MatchResult(matches, fps, [g for g in range(n_gt) if not taken[g]])


def pr_curve(scores: Sequence[float], tp: Sequence[bool], gt_count: int) -> PrCurve:
    """Precision/recall at each distinct score cut-off (ties evaluated together)."""
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # keep the last index of every run of equal scores
    last = np.r_[scores[1:] != scores[:-1], True] if len(scores) else np.zeros(0, bool)
    ctp, cfp, thr = ctp[last], cfp[last], scores[last]
    recall = ctp / gt_count if gt_count > 0 else np.zeros_like(ctp, dtype=np.float64)
    precision = ctp / np.maximum(ctp + cfp, 1)
    return PrCurve(recall.astype(np.float64), precision.astype(np.float64), thr)


def average_precision(tp: Sequence[bool], gt_count: int,
                      scores: Optional[Sequence[float]] = None) -> float:
    """Area under the precision-envelope PR curve.

    ``tp`` lists prediction outcomes in descending score order. When
    ``scores`` is given, tied scores share one operating point. No ground
    truth gives 0 if there are predictions and 1 if there are none.
    """
    if gt_count < 0:
        raise InvalidInputError("gt_count must be nonnegative")
    n = len(tp)
    if gt_count == 0:
        return 1.0 if n == 0 else 0.0
    if n == 0:
        return 0.0
    if scores is None:
        scores = -np.arange(n, dtype=np.float64)
    curve = pr_curve(scores, tp, gt_count)
    mrec = np.concatenate([[0.0], curve.recall])
    mpre = np.concatenate([[0.0], curve.precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _by_frame(items):
    out: Dict[object, list] = {}
    for i, it in enumerate(items):
        out.setdefault(it.frame, []).append(i)
    return out


def keypoint_matches(pred: Sequence[Pose], gt: Sequence[Pose], threshold: float,
                     params: OksParams):
    """Per-frame OKS matching; returns ``(scores, tp_flags)`` over all predictions."""
    pf, gf = _by_frame(pred), _by_frame(gt)
    tp = np.zeros(len(pred), dtype=bool)
    for frame, pidx in pf.items():
        gidx = gf.get(frame, [])
        areas = [pose_area(gt[g], params) for g in gidx]

        def sim(p, g):
            return oks(gt[gidx[g]], pred[pidx[p]], areas[g], params)

        res = match_greedy([pred[i].score for i in pidx], len(gidx), sim, threshold)
        for p, _ in res.matches:
            tp[pidx[p]] = True
    return np.array([p.score for p in pred], dtype=np.float64), tp


def keypoint_ap(pred: Sequence[Pose], gt: Sequence[Pose],
                oks_thresholds: Sequence[float] = DEFAULT_OKS_THRESHOLDS,
                params: Optional[OksParams] = None) -> float:
    """Mean over OKS thresholds of keypoint AP."""
    if not pred and not gt:
        return 1.0
    joints = {p.num_joints for p in list(pred) + list(gt)}
    if len(joints) != 1:
        raise InvalidInputError(f"skeleton mismatch: joint counts {sorted(joints)}")
    j = joints.pop()
    if params is None:
        params = OksParams.uniform(j)
    elif params.joints != j:
        raise InvalidInputError("OKS params do not match the skeleton")
    aps = []
    for t in oks_thresholds:
        if not 0.0 < t < 1.0:
            raise InvalidInputError("OKS thresholds must be in (0, 1)")
        scores, tp = keypoint_matches(pred, gt, t, params)
        order = np.argsort(-scores, kind="stable")
        aps.append(average_precision(tp[order], len(gt), scores[order]))
    return float(np.mean(aps))


def box_matches(pred: Sequence[DetectionBox], gt: Sequence[DetectionBox], threshold: float):
    pf, gf = _by_frame(pred), _by_frame(gt)
    tp = np.zeros(len(pred), dtype=bool)
    for frame, pidx in pf.items():
        gidx = gf.get(frame, [])
        res = match_greedy([pred[i].score for i in pidx], len(gidx),
                           lambda p, g: iou(pred[pidx[p]], gt[gidx[g]]), threshold)
        for p, _ in res.matches:
            tp[pidx[p]] = True
    return np.array([b.score for b in pred], dtype=np.float64), tp


def box_ap(pred: Sequence[DetectionBox], gt: Sequence[DetectionBox], iou_threshold: float = 0.5) -> float:
    scores, tp = box_matches(pred, gt, iou_threshold)
    order = np.argsort(-scores, kind="stable")
    return average_precision(tp[order], len(gt), scores[order])


def weighted_ap(per_video: Mapping[str, Tuple[float, float]]) -> float:
    """``sum(w * ap) / sum(w)`` over ``{video: (ap, weight)}``."""
    if not per_video:
        raise InvalidInputError("no videos to aggregate")
    aps = np.array([v[0] for v in per_video.values()], dtype=np.float64)
    ws = np.array([v[1] for v in per_video.values()], dtype=np.float64)
    if np.any(ws < 0):
        raise InvalidInputError("weights must be nonnegative")
    total = ws.sum()
    if not total > 0:
        raise InvalidInputError("total weight must be positive")
    return float(np.dot(ws, aps) / total)


def miss_rate_curve(detections: Sequence[DetectionBox], gt: Sequence[DetectionBox],
                    n_frames: int, iou_threshold: float = 0.5) -> List[Tuple[float, float]]:
    """``(fppi, miss_rate)`` at every distinct score cut-off, ascending FPPI.

    The first point is the empty detector ``(0, 1)``. Greedy matching visits
    detections in score order, so the matches at a cut-off are the matches
    of the full run restricted to detections above it.
    """
    if n_frames < 1:
        raise InvalidInputError("need at least one frame")
    if len(gt) == 0:
        raise InvalidInputError("miss rate needs ground truth")
    scores, tp = box_matches(detections, gt, iou_threshold)
    curve = [(0.0, 1.0)]
    if len(scores):
        order = np.argsort(-scores, kind="stable")
        s, t = scores[order], tp[order]
        ctp, cfp = np.cumsum(t), np.cumsum(~t)
        last = np.r_[s[1:] != s[:-1], True]
        for n_tp, n_fp in zip(ctp[last], cfp[last]):
            curve.append((n_fp / n_frames, 1.0 - n_tp / len(gt)))
    return curve


def log_average_miss_rate(curve: Sequence[Tuple[float, float]],
                          fppi_range: Tuple[float, float] = DEFAULT_FPPI_RANGE,
                          points: int = DEFAULT_MMR_POINTS) -> float:
    """Log-average miss rate over log-spaced FPPI samples, in percent.

    Each sample takes the miss rate at the last curve point whose FPPI does
    not exceed it (1.0 when there is none); the samples are averaged in log
    space, so a zero miss rate anywhere yields 0.
    """
    if len(curve) == 0:
        raise InvalidInputError("empty miss-rate curve")
    if points < 2:
        raise InvalidInputError("need at least two sample points")
    lo, hi = fppi_range
    if not 0 < lo < hi:
        raise InvalidInputError("invalid FPPI range")
    fppi = np.array([c[0] for c in curve], dtype=np.float64)
    mr = np.array([c[1] for c in curve], dtype=np.float64)
    samples = np.logspace(np.log10(lo), np.log10(hi), points)
    vals = np.empty(points)
    for i, s in enumerate(samples):
        idx = np.nonzero(fppi <= s)[0]
        vals[i] = mr[idx[-1]] if len(idx) else 1.0
    if np.any(vals <= 0):
        return 0.0
    return float(100.0 * np.exp(np.mean(np.log(vals))))
