"""Synthetic videos, detections and heatmaps standing in for real data.

Persons are textured rectangles over a textured static background, moving
on linear plus sinusoidal paths with integer-rounded positions. Joints sit
at fixed fractions of each rectangle, so ground-truth joint motion equals
the texture motion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import HIE14, PipelineConfig, Skeleton
from .errors import InvalidInputError
from .flow import smooth_binomial
from .formats import frame_name, write_detections, write_pgm, write_poses
from .heatmap import AffineTransform, heatmap_transform_for_box, write_ht
from .structures import DetectionBox, Pose
from .boxes import iou

# joint positions as fractions of the person rectangle, HIE14 order
HIE14_LAYOUT = np.array([
    [0.38, 0.88], [0.39, 0.72], [0.41, 0.56], [0.59, 0.56], [0.61, 0.72], [0.62, 0.88],
    [0.22, 0.52], [0.26, 0.38], [0.32, 0.24], [0.68, 0.24], [0.74, 0.38], [0.78, 0.52],
    [0.50, 0.20], [0.50, 0.10],
])


def texture(rng: np.random.Generator, h: int, w: int, octaves: int = 5) -> np.ndarray:
    """Multi-octave smooth noise in [0, 1] with structure at every pyramid level."""
    img = np.zeros((h, w))
    for k in range(octaves):
        s = 2 ** k
        n = smooth_binomial(rng.random((h // s + 2, w // s + 2)))
        n = np.kron(n, np.ones((s, s)))[:h, :w]
        for _ in range(k):
            n = smooth_binomial(n)
        img += n * 0.7 ** k
    img = smooth_binomial(img)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


@dataclass
class PersonSpec:
    id: int
    x: float
    y: float
    w: int
    h: int
    vx: float = 0.0
    vy: float = 0.0
    amp_x: float = 0.0
    amp_y: float = 0.0
    period: float = 20.0

    def origin(self, t: int):
        ox = self.x + self.vx * t + self.amp_x * math.sin(2 * math.pi * t / self.period)
        oy = self.y + self.vy * t + self.amp_y * math.sin(2 * math.pi * t / self.period)
        return int(round(ox)), int(round(oy))


@dataclass
class VideoSpec:
    width: int
    height: int
    frames: int
    persons: List[PersonSpec]
    seed: int = 0
    feature_dim: int = 64
    video: str = "synthetic"

    @classmethod
    def from_dict(cls, d: dict) -> "VideoSpec":
        persons = [p if isinstance(p, PersonSpec) else PersonSpec(**p) for p in d["persons"]]
        rest = {k: v for k, v in d.items() if k != "persons"}
        return cls(persons=persons, **rest)


@dataclass
class SynthVideo:
    spec: VideoSpec
    frames: List[np.ndarray]
    poses: List[Pose]
    boxes: List[DetectionBox]
    features: Dict[int, np.ndarray] = field(default_factory=dict)

    def frame_map(self) -> Dict[int, np.ndarray]:
        return dict(enumerate(self.frames))

    def poses_in(self, frame: int) -> List[Pose]:
        return [p for p in self.poses if p.frame == frame]

    def write(self, out_dir, skeleton: Skeleton = HIE14) -> Dict[str, Path]:
        out = Path(out_dir)
        fdir = out / "frames"
        fdir.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(self.frames):
            write_pgm(fdir / frame_name(k), img)
        write_poses(out / "gt_poses.jsonl", self.poses, skeleton.joints)
        write_detections(out / "gt_boxes.jsonl", self.boxes)
        return {"frames": fdir, "gt": out / "gt_poses.jsonl", "gt_boxes": out / "gt_boxes.jsonl"}


def synth_video(spec, layout: np.ndarray = HIE14_LAYOUT) -> SynthVideo:
    """Render frames and ground truth for ``spec`` (a :class:`VideoSpec` or dict)."""
    if isinstance(spec, dict):
        spec = VideoSpec.from_dict(spec)
    ids = [p.id for p in spec.persons]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"duplicate person ids in spec: {ids}")
    if spec.frames < 1 or spec.width < 8 or spec.height < 8:
        raise InvalidInputError("video needs at least one frame of 8x8 pixels")
    rng = np.random.default_rng(spec.seed)
    background = 0.25 + 0.5 * texture(rng, spec.height, spec.width)
    skins = {p.id: texture(rng, p.h, p.w) for p in spec.persons}
    features = {}
    for p in spec.persons:
        f = rng.standard_normal(spec.feature_dim)
        features[p.id] = f / np.linalg.norm(f)

    frames, poses, boxes = [], [], []
    for t in range(spec.frames):
        img = background.copy()
        for p in spec.persons:
            ox, oy = p.origin(t)
            x0, y0 = max(ox, 0), max(oy, 0)
            x1, y1 = min(ox + p.w, spec.width), min(oy + p.h, spec.height)
            if x1 > x0 and y1 > y0:
                img[y0:y1, x0:x1] = skins[p.id][y0 - oy:y1 - oy, x0 - ox:x1 - ox]
            xy = np.column_stack([ox + layout[:, 0] * p.w, oy + layout[:, 1] * p.h])
            kpts = np.column_stack([xy, np.ones(len(layout))])
            box = DetectionBox(ox, oy, ox + p.w, oy + p.h, score=1.0, track_id=p.id,
                               frame=t, feature=features[p.id], video=spec.video)
            poses.append(Pose(kpts, score=1.0, track_id=p.id, frame=t, box=box,
                              feature=features[p.id], video=spec.video))
            boxes.append(box)
        frames.append(img)
    return SynthVideo(spec, frames, poses, boxes, features)


def crossing_spec(n_persons: int = 3, frames: int = 60, seed: int = 0) -> VideoSpec:
    """Persons walking across each other on staggered rows."""
    width, height = 320, 240
    persons = []
    for i in range(n_persons):
        left_to_right = i % 2 == 0
        x = 20.0 if left_to_right else width - 20.0 - 64
        speed = (width - 104.0) / max(frames - 1, 1)
        persons.append(PersonSpec(id=i, x=x, y=10.0 + 50.0 * i, w=64, h=120,
                                  vx=speed if left_to_right else -speed,
                                  amp_y=2.0, period=15.0 + 5 * i))
    return VideoSpec(width, height, frames, persons, seed=seed)


def synth_detections(video: SynthVideo, models: int = 2, jitter: float = 1.5,
                     duplicates: bool = True, feature_noise: float = 0.05,
                     seed: int = 0) -> List[DetectionBox]:
    """Noisy per-model detections around the ground-truth boxes.

    Each model reports every person once; with ``duplicates`` it also adds a
    lower-scoring shifted copy under a different proposal id, which NMS is
    expected to remove.
    """
    rng = np.random.default_rng(seed)
    out = []
    for t in range(len(video.frames)):
        gts = [b for b in video.boxes if b.frame == t]
        for m in range(models):
            pid = 0
            for b in gts:
                for dup in ((False, True) if duplicates else (False,)):
                    d = rng.normal(0.0, jitter, 4)
                    if dup:
                        d += rng.normal(0.0, 4.0, 4)
                    score = rng.uniform(0.85, 0.99) if not dup else rng.uniform(0.3, 0.6)
                    feat = b.feature + rng.normal(0.0, feature_noise, b.feature.shape)
                    x0, y0, x1, y1 = b.x0 + d[0], b.y0 + d[1], b.x1 + d[2], b.y1 + d[3]
                    out.append(DetectionBox(x0, y0, x1, y1, score=float(score), proposal_id=pid,
                                            model_id=m, feature=feat, frame=t, video=b.video))
                    pid += 1
    return out


def gaussian_heatmaps(grid_xy: np.ndarray, height: int, width: int, sigma: float) -> np.ndarray:
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.empty((len(grid_xy), height, width))
    for j, (u, v) in enumerate(grid_xy):
        out[j] = np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2.0 * sigma ** 2))
    return out


def oracle_views(box: DetectionBox, pose: Optional[Pose], config: PipelineConfig, sigma: float = 2.0):
    """Perfect network output for ``box``: per scale, an unflipped and a flipped map.

    Returns ``[(scale, transform, values (2, J, H, W))]``. The flipped slice
    is what a network would emit for the mirrored crop. ``pose=None`` gives
    empty maps.
    """
    c = config.crop
    joints = config.skeleton.joints
    out = []
    for s in config.scales:
        tf = heatmap_transform_for_box(box, c.heatmap_width, c.heatmap_height, c.width, c.height,
                                       c.aspect[0], c.aspect[1], scale=s)
        if pose is None:
            vals = np.zeros((2, joints, c.heatmap_height, c.heatmap_width))
        else:
            grid = tf.inverse().apply(pose.xy)
            normal = gaussian_heatmaps(grid, c.heatmap_height, c.heatmap_width, sigma)
            fgrid = grid.copy()
            fgrid[:, 0] = c.heatmap_width - grid[:, 0]
            flipped = gaussian_heatmaps(fgrid, c.heatmap_height, c.heatmap_width, sigma)
            for a, b in config.skeleton.flip_pairs:
                flipped[[a, b]] = flipped[[b, a]]
            vals = np.stack([normal, flipped])
        out.append((s, tf, vals))
    return out


def attach_oracle_heatmaps(boxes: Sequence[DetectionBox], gt_poses: Sequence[Pose],
                           config: PipelineConfig, out_dir, sigma: float = 2.0,
                           min_iou: float = 0.3) -> List[DetectionBox]:
    """Write oracle heatmaps for each box and return boxes carrying references."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_frame: Dict[int, List[Pose]] = {}
    for p in gt_poses:
        by_frame.setdefault(p.frame, []).append(p)
    result = []
    for n, box in enumerate(boxes):
        best, best_iou = None, min_iou
        for p in by_frame.get(box.frame, []):
            gt_box = p.box
            if gt_box is None:
                x0, y0, x1, y1 = p.bounds()
                gt_box = DetectionBox(x0, y0, x1, y1)
            o = iou(box, gt_box)
            if o >= best_iou:
                best, best_iou = p, o
        refs = []
        for s, tf, vals in oracle_views(box, best, config, sigma):
            name = f"f{box.frame:06d}_i{n:05d}_s{s:.2f}.ht"
            write_ht(out_dir / name, vals, tf)
            refs.append({"path": name, "index": 0, "flip": False, "weight": 1.0})
            refs.append({"path": name, "index": 1, "flip": True, "weight": 1.0})
        result.append(box.copy(heatmaps=refs))
    return result
