"""OKS pose similarity and greedy pose NMS."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .structures import Pose

DEFAULT_SIGMA = 0.08
DEFAULT_OKS_THRESHOLD = 0.7
DEFAULT_MIN_INSTANCE_SCORE = 0.05


@dataclass(frozen=True)
class OksParams:
    """Per-joint falloff constants and the joint visibility cut-off."""

    sigmas: tuple
    visibility_threshold: float = 0.01

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        if not sig or any(s <= 0 for s in sig):
            raise InvalidInputError("sigmas must be positive")
        object.__setattr__(self, "sigmas", sig)

    @classmethod
    def uniform(cls, joints: int, sigma: float = DEFAULT_SIGMA, **kwargs) -> "OksParams":
        return cls((sigma,) * joints, **kwargs)

    @property
    def joints(self) -> int:
        return len(self.sigmas)


def oks(a: Pose, b: Pose, area: float, params: OksParams) -> float:
    """Mean Gaussian similarity over the joints of ``a`` that are visible."""
    if not area > 0:
        raise InvalidInputError("area must be positive")
    if a.num_joints != b.num_joints or a.num_joints != params.joints:
        raise InvalidInputError(
            f"joint count mismatch: {a.num_joints}, {b.num_joints}, params {params.joints}")
    vis = a.scores >= params.visibility_threshold
    if not vis.any():
        return 0.0
    d2 = np.sum((a.xy - b.xy) ** 2, axis=1)
    var = (2.0 * np.asarray(params.sigmas)) ** 2
    e = d2 / (2.0 * area * var)
    return float(np.mean(np.exp(-e[vis])))


def pose_area(p: Pose, params: Optional[OksParams] = None) -> float:
    """Tight keypoint-box area of the visible joints, floored at 1 px^2."""
    return p.area(None if params is None else params.visibility_threshold)


def pose_nms_indices(poses: Sequence[Pose], oks_threshold: float = DEFAULT_OKS_THRESHOLD,
                     min_instance_score: float = DEFAULT_MIN_INSTANCE_SCORE,
                     params: Optional[OksParams] = None) -> List[int]:
    if not 0.0 <= oks_threshold <= 1.0 or not 0.0 <= min_instance_score <= 1.0:
        raise InvalidInputError("thresholds must be in [0, 1]")
    if not poses:
        return []
    if params is None:
        params = OksParams.uniform(poses[0].num_joints)
    cand = [i for i, p in enumerate(poses) if p.score >= min_instance_score]
    cand.sort(key=lambda i: -poses[i].score)  # stable: ties keep input order
    keep: List[int] = []
    for i in cand:
        suppressed = False
        for k in keep:
            if oks(poses[k], poses[i], pose_area(poses[k], params), params) > oks_threshold:
                suppressed = True
                break
        if not suppressed:
            keep.append(i)
    return keep


def pose_nms(poses: Sequence[Pose], oks_threshold: float = DEFAULT_OKS_THRESHOLD,
             min_instance_score: float = DEFAULT_MIN_INSTANCE_SCORE,
             params: Optional[OksParams] = None) -> List[Pose]:
    """Drop low-scoring poses, then greedily suppress near-duplicates.

    A candidate is suppressed when its OKS against an already kept pose
    (using the kept pose's keypoint-box area) exceeds ``oks_threshold``.
    """
    return [poses[i] for i in pose_nms_indices(poses, oks_threshold, min_instance_score, params)]
