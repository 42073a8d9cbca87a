"""Static skeleton/box overlays written as PPM."""
from __future__ import annotations

import colorsys
from typing import Optional, Sequence, Tuple

import numpy as np

from .config import HIE14, Skeleton
from .structures import DetectionBox, Pose

GOLDEN = 0.618033988749895


def track_color(track_id: Optional[int]) -> Tuple[int, int, int]:
    if track_id is None:
        return (255, 255, 255)
    h = (track_id * GOLDEN) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.85, 1.0)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _line_pixels(x0: int, y0: int, x1: int, y1: int):
    """Integer Bresenham line including both endpoints."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def draw_line(img: np.ndarray, p0, p1, color) -> None:
    h, w = img.shape[:2]
    x0, y0 = int(round(p0[0])), int(round(p0[1]))
    x1, y1 = int(round(p1[0])), int(round(p1[1]))
    # overlays only ever touch poses near the frame; cap runaway lengths
    if max(abs(x1 - x0), abs(y1 - y0)) > 4 * (h + w):
        return
    for x, y in _line_pixels(x0, y0, x1, y1):
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = color


def draw_box(img: np.ndarray, box: DetectionBox, color) -> None:
    corners = [(box.x0, box.y0), (box.x1, box.y0), (box.x1, box.y1), (box.x0, box.y1)]
    for a, b in zip(corners, corners[1:] + corners[:1]):
        draw_line(img, a, b, color)


def render_overlay(frame: np.ndarray, poses: Sequence[Pose] = (),
                   boxes: Sequence[DetectionBox] = (), skeleton: Skeleton = HIE14,
                   min_joint_score: float = 0.0) -> np.ndarray:
    """Return an RGB uint8 copy of ``frame`` with boxes and skeleton edges drawn."""
    img = np.asarray(frame)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = img.copy()
    for b in boxes:
        draw_box(img, b, track_color(b.track_id))
    for p in poses:
        color = track_color(p.track_id)
        for a, b in skeleton.edges:
            if p.scores[a] < min_joint_score or p.scores[b] < min_joint_score:
                continue
            draw_line(img, p.xy[a], p.xy[b], color)
    return img
