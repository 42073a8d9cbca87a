"""Core value types: keypoints, poses and detection boxes."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InvalidInputError


class Keypoint(NamedTuple):
    x: float
    y: float
    score: float


@dataclass(eq=False)
class Pose:
    """A single person's joints.

    ``keypoints`` is a ``(J, 3)`` float array of ``[x, y, score]`` rows in
    image pixels. Joint scores and the instance score are clamped to [0, 1]
    on construction.
    """

    keypoints: np.ndarray
    score: float = 1.0
    track_id: Optional[int] = None
    frame: Optional[int] = None
    box: Optional["DetectionBox"] = None
    feature: Optional[np.ndarray] = None
    video: Optional[str] = None

    def __post_init__(self):
        kpts = np.array(self.keypoints, dtype=np.float64)
        if kpts.ndim != 2 or kpts.shape[1] != 3:
            raise InvalidInputError(f"keypoints must be (J, 3), got {kpts.shape}")
        if not np.all(np.isfinite(kpts)):
            raise InvalidInputError("keypoints must be finite")
        kpts[:, 2] = np.clip(kpts[:, 2], 0.0, 1.0)
        self.keypoints = kpts
        self.score = float(min(max(self.score, 0.0), 1.0))

    @property
    def num_joints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def scores(self) -> np.ndarray:
        return self.keypoints[:, 2]

    def keypoint(self, j: int) -> Keypoint:
        x, y, s = self.keypoints[j]
        return Keypoint(float(x), float(y), float(s))

    def with_keypoints(self, keypoints: np.ndarray) -> "Pose":
        return replace(self, keypoints=keypoints)

    def copy(self) -> "Pose":
        return replace(self, keypoints=self.keypoints.copy())

    def bounds(self, min_score: Optional[float] = None):
        """Tight ``(x0, y0, x1, y1)`` around joints scoring at least ``min_score``.

        Falls back to all joints when none qualify.
        """
        pts = self.xy
        if min_score is not None:
            keep = self.scores >= min_score
            if keep.any():
                pts = pts[keep]
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        return float(x0), float(y0), float(x1), float(y1)

    def area(self, min_score: Optional[float] = None) -> float:
        x0, y0, x1, y1 = self.bounds(min_score)
        return max((x1 - x0) * (y1 - y0), 1.0)


@dataclass(eq=False)
class DetectionBox:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float = 1.0
    proposal_id: Optional[int] = None
    model_id: Optional[int] = None
    feature: Optional[np.ndarray] = None
    track_id: Optional[int] = None
    frame: Optional[int] = None
    heatmaps: list = field(default_factory=list)
    video: Optional[str] = None

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(coords)):
            raise InvalidInputError("box coordinates must be finite")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise InvalidInputError(
                f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")
        self.score = float(min(max(self.score, 0.0), 1.0))
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=np.float64)

    @classmethod
    def from_xywh(cls, x, y, w, h, **kwargs) -> "DetectionBox":
        return cls(x, y, x + w, y + h, **kwargs)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self):
        return 0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    def copy(self, **changes) -> "DetectionBox":
        return replace(self, **changes)


def boxes_to_array(boxes: Sequence[DetectionBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x0, b.y0, b.x1, b.y1] for b in boxes], dtype=np.float64)
