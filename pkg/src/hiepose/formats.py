"""Readers and writers for the JSONL record files and frame images.

JSONL output is canonical: keys sorted, floats printed with six decimals,
one record per line, so ``write(read(x))`` is byte-stable.
"""
from __future__ import annotations

import json
import math
import re
import struct
from os import PathLike
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .errors import InvalidInputError, MissingInputError
from .flow import LUMA
from .structures import DetectionBox, Pose

SCHEMA_VERSION = 1
GRAY_MAGIC = b"GRY1"
FRAME_SUFFIXES = (".pgm", ".ppm", ".gry")

PathType = Union[str, PathLike]


# -- canonical JSON ------------------------------------------------------------

def _canon(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise InvalidInputError(f"cannot serialise non-finite number {v}")
        return f"{v:.6f}"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_canon(value[k])}"
                               for k in sorted(value)) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_canon(v) for v in value) + "]"
    raise InvalidInputError(f"cannot serialise {type(value).__name__}")


def canonical_line(record: dict) -> str:
    return _canon(record)


def write_jsonl(path: PathType, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_line(rec))
            fh.write("\n")


def iter_jsonl(path: PathType):
    """Yield ``(line_number, record)``; blank lines are skipped."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise MissingInputError(f"{path}: no such file") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InvalidInputError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def _check_version(path, lineno, rec):
    version = rec.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InvalidInputError(f"{path}:{lineno}: unsupported schema version {version!r}")


def _num(path, lineno, rec, key, kind=float, required=True):
    if key not in rec or rec[key] is None:
        if required:
            raise InvalidInputError(f"{path}:{lineno}: missing field {key!r}")
        return None
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise InvalidInputError(f"{path}:{lineno}: field {key!r} must be a number")
    if kind is int:
        if isinstance(val, float) and not val.is_integer():
            raise InvalidInputError(f"{path}:{lineno}: field {key!r} must be an integer")
        return int(val)
    return float(val)


def _vector(path, lineno, rec, key):
    val = rec.get(key)
    if val is None:
        return None
    if not isinstance(val, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        raise InvalidInputError(f"{path}:{lineno}: field {key!r} must be an array of numbers")
    return np.array(val, dtype=np.float64)


# -- detections ----------------------------------------------------------------

def detection_to_record(b: DetectionBox) -> dict:
    rec = {"frame": b.frame, "x0": float(b.x0), "y0": float(b.y0), "x1": float(b.x1),
           "y1": float(b.y1), "score": float(b.score)}
    for key in ("proposal_id", "model_id", "track_id", "video"):
        val = getattr(b, key)
        if val is not None:
            rec[key] = val
    if b.feature is not None:
        rec["feature"] = [float(v) for v in b.feature]
    if b.heatmaps:
        rec["heatmaps"] = [dict(h) for h in b.heatmaps]
    return rec


def _heatmap_refs(path, lineno, rec):
    refs = rec.get("heatmaps")
    if refs is None:
        return []
    if not isinstance(refs, list):
        raise InvalidInputError(f"{path}:{lineno}: 'heatmaps' must be a list")
    out = []
    for ref in refs:
        if not isinstance(ref, dict) or not isinstance(ref.get("path"), str):
            raise InvalidInputError(f"{path}:{lineno}: heatmap reference needs a 'path'")
        out.append({"path": ref["path"], "index": int(ref.get("index", 0)),
                    "flip": bool(ref.get("flip", False)),
                    "weight": float(ref.get("weight", 1.0))})
    return out


def read_detections(path: PathType) -> List[DetectionBox]:
    out = []
    for lineno, rec in iter_jsonl(path):
        _check_version(path, lineno, rec)
        if set(rec) <= {"version"}:
            continue
        try:
            box = DetectionBox(
                _num(path, lineno, rec, "x0"), _num(path, lineno, rec, "y0"),
                _num(path, lineno, rec, "x1"), _num(path, lineno, rec, "y1"),
                score=_num(path, lineno, rec, "score"),
                proposal_id=_num(path, lineno, rec, "proposal_id", int, False),
                model_id=_num(path, lineno, rec, "model_id", int, False),
                feature=_vector(path, lineno, rec, "feature"),
                track_id=_num(path, lineno, rec, "track_id", int, False),
                frame=_num(path, lineno, rec, "frame", int),
                heatmaps=_heatmap_refs(path, lineno, rec),
                video=rec.get("video"),
            )
        except InvalidInputError as exc:
            if str(exc).startswith(str(path)):
                raise
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
        out.append(box)
    return out


def write_detections(path: PathType, boxes: Iterable[DetectionBox]) -> None:
    write_jsonl(path, [{"version": SCHEMA_VERSION}] + [detection_to_record(b) for b in boxes])


# -- poses ---------------------------------------------------------------------

def pose_to_record(p: Pose) -> dict:
    rec = {"frame": p.frame, "score": p.score,
           "keypoints": [float(v) for v in p.keypoints.ravel()]}
    if p.track_id is not None:
        rec["track_id"] = p.track_id
    if p.video is not None:
        rec["video"] = p.video
    if p.box is not None:
        rec["box"] = [float(v) for v in (p.box.x0, p.box.y0, p.box.x1, p.box.y1, p.box.score)]
    if p.feature is not None:
        rec["feature"] = [float(v) for v in p.feature]
    return rec


def read_poses(path: PathType) -> Tuple[int, List[Pose]]:
    """Return ``(joint_count, poses)``; the first record must be the header."""
    joints = None
    out = []
    for lineno, rec in iter_jsonl(path):
        _check_version(path, lineno, rec)
        if "skeleton" in rec:
            if joints is not None:
                raise InvalidInputError(f"{path}:{lineno}: duplicate skeleton header")
            joints = _num(path, lineno, rec, "skeleton", int)
            if joints < 1:
                raise InvalidInputError(f"{path}:{lineno}: skeleton must be >= 1 joints")
            continue
        if joints is None:
            raise InvalidInputError(f"{path}:{lineno}: missing {{\"skeleton\": J}} header")
        kp = _vector(path, lineno, rec, "keypoints")
        if kp is None or kp.size != 3 * joints:
            raise InvalidInputError(
                f"{path}:{lineno}: keypoints must hold {3 * joints} numbers")
        box = None
        if rec.get("box") is not None:
            bv = _vector(path, lineno, rec, "box")
            if bv.size not in (4, 5):
                raise InvalidInputError(f"{path}:{lineno}: box must be [x0, y0, x1, y1(, score)]")
            try:
                box = DetectionBox(*bv[:4], score=float(bv[4]) if bv.size == 5 else 1.0)
            except InvalidInputError as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
        try:
            pose = Pose(kp.reshape(joints, 3), score=_num(path, lineno, rec, "score"),
                        track_id=_num(path, lineno, rec, "track_id", int, False),
                        frame=_num(path, lineno, rec, "frame", int), box=box,
                        feature=_vector(path, lineno, rec, "feature"), video=rec.get("video"))
        except InvalidInputError as exc:
            if str(exc).startswith(str(path)):
                raise
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
        if box is not None:
            box.frame = pose.frame
        out.append(pose)
    if joints is None:
        raise InvalidInputError(f"{path}: missing {{\"skeleton\": J}} header")
    return joints, out


def write_poses(path: PathType, poses: Iterable[Pose], joints: int) -> None:
    poses = list(poses)
    for p in poses:
        if p.num_joints != joints:
            raise InvalidInputError(f"pose has {p.num_joints} joints, header says {joints}")
    write_jsonl(path, [{"skeleton": joints, "version": SCHEMA_VERSION}]
                + [pose_to_record(p) for p in poses])


# -- images ----------------------------------------------------------------------

def _pnm_tokens(data: bytes, count: int):
    """Parse ``count`` header tokens after the magic; returns (tokens, payload offset)."""
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError("truncated PNM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_pnm(path: PathType) -> np.ndarray:
    """8-bit binary PGM (``(H, W)``) or PPM (``(H, W, 3)``) as uint8."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise InvalidInputError(f"{path}: not a binary PGM/PPM file")
    try:
        (w, h, maxval), off = _pnm_tokens(data, 3)
    except ValueError:
        raise InvalidInputError(f"{path}: malformed PNM header") from None
    if maxval != 255:
        raise InvalidInputError(f"{path}: only 8-bit images are supported")
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    if len(data) - off < need:
        raise InvalidInputError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    return arr.reshape((h, w) if ch == 1 else (h, w, 3)).copy()


def write_pgm(path: PathType, gray: np.ndarray) -> None:
    """Write a [0, 1] float (or uint8) gray image as 8-bit PGM."""
    arr = np.asarray(gray)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path: PathType, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_gray(path: PathType, gray: np.ndarray) -> None:
    arr = np.ascontiguousarray(gray, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(GRAY_MAGIC + struct.pack("<II", h, w))
        fh.write(arr.tobytes())


def read_gray(path: PathType) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != GRAY_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise InvalidInputError(f"{path}: truncated header")
    h, w = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * h * w:
        raise InvalidInputError(f"{path}: payload size does not match {h}x{w}")
    return np.frombuffer(data, dtype="<f4", count=h * w, offset=12).reshape(h, w).astype(np.float64)


def read_frame(path: PathType) -> np.ndarray:
    """Load a frame as a float gray image in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path}: no such frame")
    if path.suffix.lower() == ".gry":
        return read_gray(path)
    arr = read_pnm(path).astype(np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr @ LUMA
    return arr


def read_frame_rgb(path: PathType) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".gry":
        g = np.clip(np.round(read_gray(path) * 255.0), 0, 255).astype(np.uint8)
        return np.repeat(g[:, :, None], 3, axis=2)
    arr = read_pnm(path)
    return arr if arr.ndim == 3 else np.repeat(arr[:, :, None], 3, axis=2)


_FRAME_RE = re.compile(r"(\d+)$")


def frame_paths(directory: PathType) -> Dict[int, Path]:
    """Index frame files by the trailing integer in their stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingInputError(f"{directory}: frame directory not found")
    out: Dict[int, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in FRAME_SUFFIXES:
            continue
        m = _FRAME_RE.search(p.stem)
        if not m:
            continue
        k = int(m.group(1))
        if k in out:
            raise InvalidInputError(f"{directory}: two files for frame {k}")
        out[k] = p
    return out


def frame_name(k: int, suffix: str = ".pgm") -> str:
    return f"frame_{k:06d}{suffix}"
