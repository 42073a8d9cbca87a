"""Appearance-based track association and optical-flow pose smoothing.

Tracks are built frame to frame by Hungarian matching on a blend of Re-ID
cosine similarity and box IoU. Each pose with a tracked neighbour on both
sides is then smoothed by blending the previous pose pushed forward along
the flow, the next pose pulled backward, and the current estimate::

    smoothed = alpha * prev_fwd + alpha * next_bwd + (1 - 2 * alpha) * current
"""
from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import iou
from .errors import InvalidInputError, MissingInputError
from .flow import FlowVector, PyramidParams, gaussian_pyramid, lucas_kanade_at_points, propagate_pose
from .structures import DetectionBox, Pose

log = logging.getLogger(__name__)

DEFAULT_SIM_THRESHOLD = 0.4
DEFAULT_IOU_WEIGHT = 0.3
DEFAULT_ALPHA = 0.25
DEFAULT_SMOOTH_CONF = 0.3


class Instance(NamedTuple):
    box: Optional[DetectionBox]
    pose: Optional[Pose]
    feature: Optional[np.ndarray] = None


@dataclass
class TrackEntry:
    pose: Optional[Pose]
    box: Optional[DetectionBox]
    feature: Optional[np.ndarray] = None


@dataclass
class Track:
    id: int
    entries: Dict[int, TrackEntry] = field(default_factory=dict)

    @property
    def frames(self) -> List[int]:
        return sorted(self.entries)

    def add(self, frame: int, entry: TrackEntry):
        if frame in self.entries:
            raise InvalidInputError(f"track {self.id} already has frame {frame}")
        self.entries[frame] = entry


@dataclass(frozen=True)
class SmoothingParams:
    alpha: float = DEFAULT_ALPHA
    confidence_threshold: float = DEFAULT_SMOOTH_CONF
    per_joint_gating: bool = False
    failure_factor: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 0.5:
            raise InvalidInputError(f"alpha must be in [0, 0.5], got {self.alpha}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise InvalidInputError("confidence threshold must be in [0, 1]")


# -- association -----------------------------------------------------------

def appearance_similarity(fa, fb) -> float:
    a = np.asarray(fa, dtype=np.float64).ravel()
    b = np.asarray(fb, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"feature dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("zero feature vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def instance_box(inst: Instance) -> DetectionBox:
    if inst.box is not None:
        return inst.box
    if inst.pose is None:
        raise InvalidInputError("instance has neither box nor pose")
    x0, y0, x1, y1 = inst.pose.bounds()
    return DetectionBox(x0, y0, max(x1, x0 + 1.0), max(y1, y0 + 1.0))


def instance_feature(inst: Instance):
    if inst.feature is not None:
        return inst.feature
    if inst.box is not None and inst.box.feature is not None:
        return inst.box.feature
    if inst.pose is not None and inst.pose.feature is not None:
        return inst.pose.feature
    return None


def affinity_matrix(prev: Sequence[Instance], cur: Sequence[Instance],
                    iou_weight: float = DEFAULT_IOU_WEIGHT) -> np.ndarray:
    """``(1 - w) * cosine + w * IoU``; IoU alone when a feature is missing."""
    aff = np.zeros((len(prev), len(cur)))
    pboxes = [instance_box(p) for p in prev]
    cboxes = [instance_box(c) for c in cur]
    pfeat = [instance_feature(p) for p in prev]
    cfeat = [instance_feature(c) for c in cur]
    for i in range(len(prev)):
        for j in range(len(cur)):
            o = iou(pboxes[i], cboxes[j])
            if pfeat[i] is None or cfeat[j] is None:
                aff[i, j] = o
            else:
                sim = appearance_similarity(pfeat[i], cfeat[j])
                aff[i, j] = (1.0 - iou_weight) * sim + iou_weight * o
    return aff


def hungarian_max(affinity: np.ndarray) -> List[Tuple[int, int]]:
    """One-to-one assignment maximising total affinity (rectangular allowed)."""
    affinity = np.asarray(affinity, dtype=np.float64)
    if affinity.size == 0:
        return []
    rows, cols = linear_sum_assignment(affinity, maximize=True)
    return sorted(zip(rows.tolist(), cols.tolist()))


def associate_frames(prev: Sequence[Instance], cur: Sequence[Instance],
                     sim_threshold: float = DEFAULT_SIM_THRESHOLD,
                     iou_weight: float = DEFAULT_IOU_WEIGHT) -> List[Optional[int]]:
    """Match current instances to previous ones.

    Returns, for each element of ``cur``, the index into ``prev`` it continues,
    or ``None`` when it should start a new track.
    """
    if not 0.0 <= sim_threshold <= 1.0 or not 0.0 <= iou_weight <= 1.0:
        raise InvalidInputError("sim_threshold and iou_weight must be in [0, 1]")
    out: List[Optional[int]] = [None] * len(cur)
    if not prev or not cur:
        return out
    aff = affinity_matrix(prev, cur, iou_weight)
    for i, j in hungarian_max(aff):
        if aff[i, j] >= sim_threshold:
            out[j] = i
    return out


def build_tracks(frames: Sequence[Sequence[Instance]], sim_threshold: float = DEFAULT_SIM_THRESHOLD,
                 iou_weight: float = DEFAULT_IOU_WEIGHT, first_frame: int = 0):
    """Link instances over consecutive frames.

    ``frames[k]`` holds the instances of frame ``first_frame + k``; an empty
    list is an empty frame. Ids are assigned in order of first appearance and
    never bridge a gap. Returns ``(tracks, ids)`` with ``ids[k][n]`` the track
    id of instance ``n`` in frame ``k``.
    """
    tracks: List[Track] = []
    ids: List[List[int]] = []
    prev: Sequence[Instance] = []
    prev_ids: List[int] = []
    for k, cur in enumerate(frames):
        links = associate_frames(prev, cur, sim_threshold, iou_weight)
        cur_ids = []
        for n, (inst, link) in enumerate(zip(cur, links)):
            if link is None:
                tid = len(tracks)
                tracks.append(Track(tid))
            else:
                tid = prev_ids[link]
            tracks[tid].add(first_frame + k, TrackEntry(inst.pose, inst.box, instance_feature(inst)))
            cur_ids.append(tid)
        ids.append(cur_ids)
        prev, prev_ids = cur, cur_ids
    return tracks, ids


# -- smoothing ---------------------------------------------------------------

def blend_poses(prev_fwd: Pose, next_bwd: Pose, current: Pose, alpha: float,
                per_joint_gating: bool = False) -> np.ndarray:
    """Coordinate-wise three-term blend; returns the ``(J, 2)`` smoothed joints."""
    c = current.xy
    if alpha == 0.0:
        return c.copy()
    p, n = prev_fwd.xy, next_bwd.xy
    if not per_joint_gating:
        return alpha * p + alpha * n + (1.0 - 2.0 * alpha) * c
    wp = np.where(prev_fwd.scores > 0, alpha, 0.0)[:, None]
    wn = np.where(next_bwd.scores > 0, alpha, 0.0)[:, None]
    return wp * p + wn * n + (1.0 - wp - wn) * c


def temporal_smooth(prev: Optional[Pose], current: Pose, next: Optional[Pose],
                    flow_prev: Optional[Sequence[FlowVector]],
                    flow_next: Optional[Sequence[FlowVector]],
                    params: SmoothingParams = SmoothingParams()) -> Pose:
    """Smooth one pose from its tracked neighbours.

    ``flow_prev`` holds the k-1 -> k flow at ``prev``'s joints and
    ``flow_next`` the k+1 -> k flow at ``next``'s joints. The current pose is
    returned unchanged when a neighbour is missing or scores below the
    confidence threshold. Scores are never modified.
    """
    ids = {p.track_id for p in (prev, current, next) if p is not None}
    if len(ids) > 1:
        raise InvalidInputError(f"poses belong to different tracks: {sorted(ids, key=str)}")
    if prev is None or next is None or flow_prev is None or flow_next is None:
        return current.copy()
    thr = params.confidence_threshold
    if prev.score < thr or next.score < thr:
        return current.copy()
    if params.alpha == 0.0:
        return current.copy()
    fwd = propagate_pose(prev, flow_prev, params.failure_factor)
    bwd = propagate_pose(next, flow_next, params.failure_factor)
    xy = blend_poses(fwd, bwd, current, params.alpha, params.per_joint_gating)
    kpts = current.keypoints.copy()
    kpts[:, :2] = xy
    return current.with_keypoints(kpts)


class FrameSource:
    """Lazy, cached access to gray frames and their pyramids by frame index."""

    def __init__(self, loader: Callable[[int], np.ndarray], available: Optional[set] = None,
                 levels: int = 3):
        self._loader = loader
        self.available = available
        self.levels = levels
        self._pyr: Dict[int, list] = {}

    @classmethod
    def from_mapping(cls, frames: Mapping[int, np.ndarray], levels: int = 3):
        return cls(lambda k: frames[k], set(frames), levels)

    def has(self, k: int) -> bool:
        return self.available is None or k in self.available

    def pyramid(self, k: int):
        if k not in self._pyr:
            if not self.has(k):
                raise MissingInputError(f"missing frame image for frame {k}")
            self._pyr[k] = gaussian_pyramid(self._loader(k), self.levels)
        return self._pyr[k]


def _group_tracks(poses: Sequence[Pose], sim_threshold: float, iou_weight: float):
    """Map track id -> {frame: pose index}; builds tracks when ids are absent."""
    if poses and all(p.track_id is not None for p in poses):
        by_track: Dict[int, Dict[int, int]] = defaultdict(dict)
        for i, p in enumerate(poses):
            if p.frame in by_track[p.track_id]:
                raise InvalidInputError(
                    f"track {p.track_id} has two poses in frame {p.frame}")
            by_track[p.track_id][p.frame] = i
        return by_track, [p.track_id for p in poses]
    frames = sorted({p.frame for p in poses})
    if not frames:
        return {}, []
    first, last = frames[0], frames[-1]
    slots: List[List[int]] = [[] for _ in range(last - first + 1)]
    for i, p in enumerate(poses):
        slots[p.frame - first].append(i)
    insts = [[Instance(poses[i].box, poses[i], poses[i].feature) for i in s] for s in slots]
    _, ids = build_tracks(insts, sim_threshold, iou_weight, first_frame=first)
    track_of = [None] * len(poses)
    by_track = defaultdict(dict)
    for s, slot_ids in zip(slots, ids):
        for i, tid in zip(s, slot_ids):
            track_of[i] = tid
            by_track[tid][poses[i].frame] = i
    return by_track, track_of


def smooth_video(poses: Sequence[Pose], frames, params: SmoothingParams = SmoothingParams(),
                 flow_params: PyramidParams = PyramidParams(), passes: int = 1,
                 sim_threshold: float = DEFAULT_SIM_THRESHOLD,
                 iou_weight: float = DEFAULT_IOU_WEIGHT, threads: int = 1,
                 flow_log: Optional[list] = None) -> List[Pose]:
    """Smooth every pose that has a tracked neighbour on both sides.

    ``frames`` is a :class:`FrameSource` or a mapping frame index -> image.
    Output has the same order and length as ``poses``; poses without a track
    id receive the id they were linked under. ``flow_log``, when given,
    collects ``{frame, joint, dx, dy, valid}`` records.
    """
    if passes < 1:
        raise InvalidInputError("passes must be >= 1")
    if not isinstance(frames, FrameSource):
        frames = FrameSource.from_mapping(frames, flow_params.levels)
    for p in poses:
        if p.frame is None:
            raise InvalidInputError("every pose needs a frame index")
        if not frames.has(p.frame):
            raise MissingInputError(f"missing frame image for frame {p.frame}")

    by_track, track_of = _group_tracks(poses, sim_threshold, iou_weight)
    current = [p.copy() for p in poses]
    for i, tid in enumerate(track_of):
        current[i].track_id = tid

    cells = []
    for tid in sorted(by_track):
        entries = by_track[tid]
        for k in sorted(entries):
            if k - 1 in entries and k + 1 in entries:
                cells.append((entries[k - 1], entries[k], entries[k + 1], k))
    # build all pyramids up front so workers only read
    needed = sorted({k + d for *_, k in cells for d in (-1, 0, 1)})
    for k in needed:
        frames.pyramid(k)

    for _ in range(passes):
        src = current

        def work(cell):
            ip, ic, inx, k = cell
            prev, cur, nxt = src[ip], src[ic], src[inx]
            if prev.score < params.confidence_threshold or nxt.score < params.confidence_threshold:
                return cur.copy(), None
            fp = lucas_kanade_at_points(None, None, prev.xy, flow_params,
                                        frames.pyramid(k - 1), frames.pyramid(k))
            fn = lucas_kanade_at_points(None, None, nxt.xy, flow_params,
                                        frames.pyramid(k + 1), frames.pyramid(k))
            return temporal_smooth(prev, cur, nxt, fp, fn, params), (k, fp, fn)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, cells))
        else:
            results = [work(c) for c in cells]
        out = [p.copy() for p in src]
        for (ip, ic, inx, k), (pose, flows) in zip(cells, results):
            out[ic] = pose
            if flow_log is not None and flows is not None:
                _, fp, fn = flows
                for direction, fl in (("forward", fp), ("backward", fn)):
                    for j, f in enumerate(fl):
                        flow_log.append({"frame": k, "joint": j, "dx": f.dx, "dy": f.dy,
                                         "valid": f.valid, "track_id": src[ic].track_id,
                                         "direction": direction})
        current = out
    log.debug("smoothed %d of %d poses over %d pass(es)", len(cells), len(poses), passes)
    return current
