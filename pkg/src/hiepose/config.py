"""Skeleton definitions and the versioned pipeline configuration document."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import InvalidInputError, MissingInputError
from .heatmap import DEFAULT_SCALES, validate_flip_pairs

CONFIG_VERSION = 1
STAGES = ("detpost", "fuse", "posenms", "track", "smooth", "eval")


@dataclass(frozen=True)
class Skeleton:
    names: Tuple[str, ...]
    flip_pairs: Tuple[Tuple[int, int], ...]
    edges: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        validate_flip_pairs(self.flip_pairs, len(self.names))
        for a, b in self.edges:
            if not (0 <= a < len(self.names) and 0 <= b < len(self.names)):
                raise InvalidInputError(f"skeleton edge ({a}, {b}) out of range")

    @property
    def joints(self) -> int:
        return len(self.names)

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(tuple(d["names"]),
                   tuple(tuple(p) for p in d.get("flip_pairs", ())),
                   tuple(tuple(e) for e in d.get("edges", ())))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "flip_pairs": [list(p) for p in self.flip_pairs],
                "edges": [list(e) for e in self.edges]}


# 14-joint ordering used by default. The HIE joint order is dataset
# documentation; this is a convention and can be replaced in the config.
HIE14 = Skeleton(
    names=("right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle",
           "right_wrist", "right_elbow", "right_shoulder", "left_shoulder", "left_elbow",
           "left_wrist", "neck", "head_top"),
    flip_pairs=((0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9)),
    edges=((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (6, 7), (7, 8), (8, 12), (12, 9),
           (9, 10), (10, 11), (12, 13), (2, 8), (3, 9)),
)


def _section(cls, data: Optional[dict], name: str):
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise InvalidInputError(f"config [{name}]: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass
class CropConfig:
    width: int = 192
    height: int = 256
    aspect: Tuple[int, int] = (3, 4)
    heatmap_width: int = 48
    heatmap_height: int = 64


@dataclass
class FusionConfig:
    model_weights: Dict[str, float] = field(default_factory=dict)
    iou_threshold: float = 0.55
    nms_iou_threshold: float = 0.5
    set_nms: bool = True
    flip_shift: bool = True


@dataclass
class PoseNmsConfig:
    oks_threshold: float = 0.7
    min_score: float = 0.05
    sigma: float = 0.08
    sigmas: Optional[List[float]] = None
    visibility_threshold: float = 0.01


@dataclass
class TrackingConfig:
    sim_threshold: float = 0.4
    iou_weight: float = 0.3


@dataclass
class SmoothingConfig:
    alpha: float = 0.25
    confidence_threshold: float = 0.3
    per_joint_gating: bool = False
    passes: int = 1
    levels: int = 3
    window_radius: int = 10
    max_iterations: int = 30
    epsilon: float = 0.01
    min_eigenvalue: float = 1e-4


@dataclass
class EvalConfig:
    task: str = "kp"
    oks_thresholds: Optional[List[float]] = None
    iou_threshold: float = 0.5
    weights: Optional[str] = None


@dataclass
class EstimatorConfig:
    kind: str = "files"
    gt: Optional[str] = None
    sigma: float = 2.0
    min_iou: float = 0.3


@dataclass
class PathsConfig:
    detections: Optional[str] = None
    frames: Optional[str] = None
    gt: Optional[str] = None
    pred: Optional[str] = None
    poses: Optional[str] = None
    out_dir: str = "out"


@dataclass
class PipelineConfig:
    skeleton: Skeleton = HIE14
    stages: Tuple[str, ...] = STAGES
    scales: Tuple[float, ...] = DEFAULT_SCALES
    crop: CropConfig = field(default_factory=CropConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pose_nms: PoseNmsConfig = field(default_factory=PoseNmsConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    threads: int = 1

    def validate(self, check_paths: bool = False) -> "PipelineConfig":
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise InvalidInputError(f"unknown stages {bad}; expected a subset of {STAGES}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise InvalidInputError("scale factors must be positive")
        if self.estimator.kind not in ("files", "synthetic"):
            raise InvalidInputError(f"unknown estimator kind {self.estimator.kind!r}")
        if self.eval.task not in ("kp", "det"):
            raise InvalidInputError(f"unknown eval task {self.eval.task!r}")
        if self.pose_nms.sigmas is not None and len(self.pose_nms.sigmas) != self.skeleton.joints:
            raise InvalidInputError("pose_nms.sigmas length does not match the skeleton")
        sm, pn, tr = self.smoothing, self.pose_nms, self.tracking
        checks = [
            (0.0 <= sm.alpha <= 0.5, "smoothing.alpha must lie in [0, 0.5]"),
            (0.0 <= sm.confidence_threshold <= 1.0, "smoothing.confidence_threshold must lie in [0, 1]"),
            (sm.passes >= 1, "smoothing.passes must be >= 1"),
            (0.0 <= pn.oks_threshold <= 1.0, "pose_nms.oks_threshold must lie in [0, 1]"),
            (0.0 <= tr.sim_threshold <= 1.0 and 0.0 <= tr.iou_weight <= 1.0,
             "tracking thresholds must lie in [0, 1]"),
            (0.0 <= self.fusion.nms_iou_threshold <= 1.0 and 0.0 <= self.fusion.iou_threshold <= 1.0,
             "fusion IoU thresholds must lie in [0, 1]"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidInputError(f"config: {msg}")
        if check_paths:
            for key in ("detections", "frames", "gt", "pred", "poses"):
                val = getattr(self.paths, key)
                if val is not None and not Path(val).exists():
                    raise MissingInputError(f"config paths.{key}: {val} does not exist")
        return self

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "PipelineConfig":
        d = dict(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise InvalidInputError(f"unsupported config version {version!r}")
        sections = {"crop": CropConfig, "fusion": FusionConfig, "pose_nms": PoseNmsConfig,
                    "tracking": TrackingConfig, "smoothing": SmoothingConfig,
                    "eval": EvalConfig, "estimator": EstimatorConfig, "paths": PathsConfig}
        kwargs = {}
        for key, val in d.items():
            if key in sections:
                kwargs[key] = _section(sections[key], val, key)
            elif key == "skeleton":
                kwargs[key] = Skeleton.from_dict(val)
            elif key in ("stages", "scales"):
                kwargs[key] = tuple(val)
            elif key in ("seed", "threads"):
                kwargs[key] = int(val)
            else:
                raise InvalidInputError(f"config: unknown key {key!r}")
        cfg = cls(**kwargs)
        if isinstance(cfg.crop.aspect, list):
            cfg.crop.aspect = tuple(cfg.crop.aspect)
        if base_dir is not None:
            for key in ("detections", "frames", "gt", "pred", "poses", "out_dir"):
                val = getattr(cfg.paths, key)
                if val is not None and not Path(val).is_absolute():
                    setattr(cfg.paths, key, str(base_dir / val))
            for holder, key in ((cfg.estimator, "gt"), (cfg.eval, "weights")):
                val = getattr(holder, key)
                if val is not None and not Path(val).is_absolute():
                    setattr(holder, key, str(base_dir / val))
        return cfg.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skeleton"] = self.skeleton.to_dict()
        d["stages"] = list(self.stages)
        d["scales"] = list(self.scales)
        d["version"] = CONFIG_VERSION
        return d


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path}: config not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: malformed config ({exc.msg})") from None
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    return PipelineConfig.from_dict(data, base_dir=path.parent)
