"""Sparse pyramidal Lucas-Kanade flow and joint propagation.

Images are ``(H, W)`` float arrays in [0, 1]; pixel ``(row i, col j)`` sits
at continuous position ``(x=j, y=i)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError
from .structures import Pose

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
LUMA = np.array([0.299, 0.587, 0.114])


class FlowVector(NamedTuple):
    dx: float
    dy: float
    valid: bool


@dataclass(frozen=True)
class PyramidParams:
    levels: int = 3
    window_radius: int = 10
    max_iterations: int = 30
    epsilon: float = 0.01
    min_eigenvalue: float = 1e-4

    def __post_init__(self):
        if self.levels < 1 or self.window_radius < 1 or self.max_iterations < 1:
            raise InvalidInputError("levels, window radius and iterations must be >= 1")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")


def as_gray(img) -> np.ndarray:
    """Validate a gray image, converting ``(H, W, 3)`` RGB by luma weights."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr @ LUMA
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"expected an (H, W) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")
    return arr


def smooth_binomial(img: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur with mirror (no edge repeat) borders."""
    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        mode = "reflect" if n > 2 else "edge"
        pad = [(0, 0), (0, 0)]
        pad[axis] = (2, 2)
        padded = np.pad(out, pad, mode=mode)
        acc = np.zeros_like(out)
        for k, w in enumerate(BINOMIAL_5):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(k, k + n)
            acc += w * padded[tuple(sl)]
        out = acc
    return out


def pyr_down(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return smooth_binomial(img)[0:2 * (h // 2):2, 0:2 * (w // 2):2]


def gaussian_pyramid(img, levels: int) -> List[np.ndarray]:
    img = as_gray(img)
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    need = 2 ** (levels - 1)
    if img.shape[0] < need or img.shape[1] < need:
        raise InvalidInputError(
            f"image {img.shape} too small for {levels} pyramid levels (need {need} px per side)")
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(pyr_down(pyr[-1]))
    return pyr


def gradients(img: np.ndarray):
    """Central-difference ``(Ix, Iy)``; one-sided on the border."""
    iy, ix = np.gradient(img)
    return ix, iy


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup with border replication."""
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def lucas_kanade_at_points(prev, next, points, params: PyramidParams = PyramidParams(),
                           prev_pyramid=None, next_pyramid=None) -> List[FlowVector]:
    """Track ``points`` (``(x, y)`` pairs) from ``prev`` to ``next``.

    Coarse-to-fine iterative LK; all points are solved together. A point is
    invalid when the level-0 structure tensor's smallest eigenvalue (per
    window pixel) is under ``params.min_eigenvalue`` or its tracked position
    leaves the image. Prebuilt pyramids may be passed to share work.
    """
    prev_pyr = prev_pyramid or gaussian_pyramid(prev, params.levels)
    next_pyr = next_pyramid or gaussian_pyramid(next, params.levels)
    if prev_pyr[0].shape != next_pyr[0].shape:
        raise InvalidInputError(
            f"frame size mismatch: {prev_pyr[0].shape} vs {next_pyr[0].shape}")
    if len(prev_pyr) < params.levels or len(next_pyr) < params.levels:
        raise InvalidInputError("pyramid has fewer levels than requested")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return []
    h, w = prev_pyr[0].shape

    r = params.window_radius
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    ox, oy = ox.ravel(), oy.ravel()
    npix = ox.size

    guess = np.zeros((n, 2))
    flow = np.zeros((n, 2))
    well_conditioned = np.ones(n, dtype=bool)
    finite = np.all(np.isfinite(pts), axis=1)
    pts_safe = np.where(finite[:, None], pts, 0.0)

    for level in range(params.levels - 1, -1, -1):
        I = prev_pyr[level]
        J = next_pyr[level]
        Ix, Iy = gradients(I)
        p = pts_safe / (2.0 ** level)
        wx = p[:, 0:1] + ox[None, :]
        wy = p[:, 1:2] + oy[None, :]
        Iw = sample_bilinear(I, wx, wy)
        gx = sample_bilinear(Ix, wx, wy)
        gy = sample_bilinear(Iy, wx, wy)
        gxx = np.sum(gx * gx, axis=1)
        gxy = np.sum(gx * gy, axis=1)
        gyy = np.sum(gy * gy, axis=1)
        tr_half = 0.5 * (gxx + gyy)
        disc = np.sqrt(np.maximum(0.25 * (gxx - gyy) ** 2 + gxy ** 2, 0.0))
        min_eig = (tr_half - disc) / npix
        det = gxx * gyy - gxy * gxy
        ok = (min_eig >= params.min_eigenvalue) & (det > 0)
        if level == 0:
            well_conditioned = ok

        v = np.zeros((n, 2))
        active = ok.copy()
        for _ in range(params.max_iterations):
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            sx = wx[idx] + guess[idx, 0:1] + v[idx, 0:1]
            sy = wy[idx] + guess[idx, 1:2] + v[idx, 1:2]
            diff = Iw[idx] - sample_bilinear(J, sx, sy)
            bx = np.sum(diff * gx[idx], axis=1)
            by = np.sum(diff * gy[idx], axis=1)
            d = det[idx]
            ex = (gyy[idx] * bx - gxy[idx] * by) / d
            ey = (gxx[idx] * by - gxy[idx] * bx) / d
            v[idx, 0] += ex
            v[idx, 1] += ey
            converged = ex * ex + ey * ey < params.epsilon ** 2
            active[idx[converged]] = False
        if level > 0:
            guess = 2.0 * (guess + v)
        else:
            flow = guess + v

    out = []
    for i in range(n):
        dx, dy = flow[i]
        tx, ty = pts_safe[i, 0] + dx, pts_safe[i, 1] + dy
        inside = (0.0 <= pts_safe[i, 0] <= w - 1 and 0.0 <= pts_safe[i, 1] <= h - 1
                  and 0.0 <= tx <= w - 1 and 0.0 <= ty <= h - 1)
        valid = bool(finite[i] and well_conditioned[i] and inside
                     and np.isfinite(dx) and np.isfinite(dy))
        if valid:
            out.append(FlowVector(float(dx), float(dy), True))
        else:
            out.append(FlowVector(0.0, 0.0, False))
    return out


def propagate_pose(pose: Pose, flow_at_joints: Sequence[FlowVector],
                   failure_factor: float = 0.0) -> Pose:
    """Move every joint along its flow vector.

    Joints whose flow is invalid stay put with their score multiplied by
    ``failure_factor``.
    """
    if len(flow_at_joints) != pose.num_joints:
        raise InvalidInputError(
            f"{len(flow_at_joints)} flow vectors for {pose.num_joints} joints")
    kpts = pose.keypoints.copy()
    for j, f in enumerate(flow_at_joints):
        if f.valid:
            kpts[j, 0] += f.dx
            kpts[j, 1] += f.dy
        else:
            kpts[j, 2] *= failure_factor
    return pose.with_keypoints(kpts)
