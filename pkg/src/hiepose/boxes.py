"""Box post-processing for dense, overlapping person detections.

Plain greedy NMS, Set NMS (boxes from the same proposal never suppress each
other), the EMD set distance between a proposal's predictions and its ground
truth, and weighted ensemble fusion across detector models.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, UnsupportedSizeError
from .structures import DetectionBox, boxes_to_array

DEFAULT_NMS_IOU = 0.5
DEFAULT_FUSION_IOU = 0.55
MAX_EMD_SET = 8


def iou(a: DetectionBox, b: DetectionBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(min(inter / union, 1.0))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Descending-score order; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _greedy_suppress(boxes: Sequence[DetectionBox], iou_threshold: float,
                     exempt_same_proposal: bool) -> List[int]:
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidInputError("iou_threshold must be in [0, 1]")
    n = len(boxes)
    if n == 0:
        return []
    order = score_order([b.score for b in boxes])
    ious = iou_matrix(boxes_to_array(boxes), boxes_to_array(boxes))
    pids = np.array([-1 if b.proposal_id is None else b.proposal_id for b in boxes])
    has_pid = np.array([b.proposal_id is not None for b in boxes])
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive[i] = False
        hit = alive & (ious[i] > iou_threshold)
        if exempt_same_proposal and has_pid[i]:
            hit &= ~(has_pid & (pids == pids[i]))
        alive &= ~hit
    return keep


def nms_indices(boxes: Sequence[DetectionBox], iou_threshold: float = DEFAULT_NMS_IOU) -> List[int]:
    return _greedy_suppress(boxes, iou_threshold, exempt_same_proposal=False)


def nms(boxes: Sequence[DetectionBox], iou_threshold: float = DEFAULT_NMS_IOU) -> List[DetectionBox]:
    """Greedy NMS; suppresses a box when IoU with a kept box exceeds the threshold."""
    return [boxes[i] for i in nms_indices(boxes, iou_threshold)]


def set_nms_indices(boxes: Sequence[DetectionBox], iou_threshold: float = DEFAULT_NMS_IOU) -> List[int]:
    return _greedy_suppress(boxes, iou_threshold, exempt_same_proposal=True)


def set_nms(boxes: Sequence[DetectionBox], iou_threshold: float = DEFAULT_NMS_IOU) -> List[DetectionBox]:
    """Greedy NMS that never suppresses between boxes sharing a proposal id.

    A missing ``proposal_id`` on either box means ordinary suppression.
    """
    return [boxes[i] for i in set_nms_indices(boxes, iou_threshold)]


# -- EMD set distance ----------------------------------------------------------

def default_emd_cost(pred: DetectionBox, score: float, gt: Optional[DetectionBox]) -> float:
    """``1 - IoU`` for a real match; the prediction's score when sent to background."""
    if gt is None:
        return float(score)
    return 1.0 - iou(pred, gt)


def emd_set_distance(predictions: Sequence[Tuple[DetectionBox, float]],
                     ground_truth: Sequence[DetectionBox],
                     per_pair_cost: Callable = default_emd_cost):
    """Minimum-cost one-to-one matching of K predictions to K padded targets.

    Ground truth is padded with background (``None``) up to K. Every
    permutation is enumerated, so K is capped at 8. Returns
    ``(distance, assignment)`` where ``assignment[i]`` is the ground-truth
    index matched to prediction ``i`` or ``None`` for background.
    """
    k = len(predictions)
    if k > MAX_EMD_SET:
        raise UnsupportedSizeError(f"EMD enumeration supports at most {MAX_EMD_SET} predictions, got {k}")
    if len(ground_truth) > k:
        raise InvalidInputError("more ground-truth boxes than predictions")
    if k == 0:
        return 0.0, ()
    targets = list(ground_truth) + [None] * (k - len(ground_truth))
    cost = np.array([[per_pair_cost(box, score, t) for t in targets]
                     for box, score in predictions], dtype=np.float64)
    best, best_perm = math.inf, None
    rows = range(k)
    for perm in itertools.permutations(range(k)):
        total = 0.0
        for i in rows:
            total += cost[i, perm[i]]
        if total < best:
            best, best_perm = total, perm
    assignment = tuple(p if p < len(ground_truth) else None for p in best_perm)
    return float(best), assignment


# -- ensemble fusion ------------------------------------------------------------

def weighted_box_fusion(model_outputs: Sequence[Tuple[float, Sequence[DetectionBox]]],
                        iou_threshold: float = DEFAULT_FUSION_IOU) -> List[DetectionBox]:
    """Fuse boxes from several detectors.

    Boxes from all models are visited by descending score and join the
    existing cluster whose fused box overlaps best (IoU >= threshold), or
    seed a new one. A cluster's coordinates are the ``weight * score``
    weighted mean of its members; its score is the model-weighted mean member
    score times ``contributing models / total models``.
    """
    if any(w <= 0 for w, _ in model_outputs):
        raise InvalidInputError("model weights must be positive")
    n_models = len(model_outputs)
    entries = []
    for m, (w, boxes) in enumerate(model_outputs):
        for b in boxes:
            entries.append((float(w), m, b))
    if not entries:
        return []
    # descending score, ties by geometry so model order does not matter
    entries.sort(key=lambda e: (-e[2].score, e[2].x0, e[2].y0, e[2].x1, e[2].y1, -e[0]))

    clusters: List[list] = []
    fused: List[DetectionBox] = []
    for w, m, box in entries:
        best, best_iou = -1, -1.0
        for ci, fb in enumerate(fused):
            o = iou(fb, box)
            if o >= iou_threshold and o > best_iou:
                best, best_iou = ci, o
        if best < 0:
            clusters.append([(w, m, box)])
            fused.append(_fuse_cluster(clusters[-1], n_models))
        else:
            clusters[best].append((w, m, box))
            fused[best] = _fuse_cluster(clusters[best], n_models)
    return [fused[i] for i in score_order([f.score for f in fused])]


def _fuse_cluster(members, n_models: int) -> DetectionBox:
    ws = [w * b.score for w, _, b in members]
    total = math.fsum(ws)
    if total > 0:
        coords = [math.fsum(wi * getattr(b, c) for wi, (_, _, b) in zip(ws, members)) / total
                  for c in ("x0", "y0", "x1", "y1")]
    else:
        coords = [math.fsum(getattr(b, c) for _, _, b in members) / len(members)
                  for c in ("x0", "y0", "x1", "y1")]
    wsum = math.fsum(w for w, _, _ in members)
    mean_score = math.fsum(w * b.score for w, _, b in members) / wsum
    n_contrib = len({m for _, m, _ in members})
    seed = members[0][2]
    feature = None
    if all(b.feature is not None for _, _, b in members) and total > 0:
        feature = sum(wi * b.feature for wi, (_, _, b) in zip(ws, members)) / total
    return DetectionBox(*coords, score=mean_score * n_contrib / n_models,
                        proposal_id=seed.proposal_id if n_models == 1 else None,
                        frame=seed.frame, feature=feature, video=seed.video)
