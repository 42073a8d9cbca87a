"""Heatmap geometry, flip/scale fusion and keypoint decoding.

A :class:`Heatmap` carries a ``(J, H, W)`` response tensor together with the
affine map from heatmap grid coordinates ``(u, v)`` (column, row) to source
image pixels. Grid cell ``(u, v)`` sits at the continuous position
``(u, v)``; the crop-to-image transforms use the same corner convention, so a
crop of width ``crop_w`` spans ``[0, crop_w]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError
from .structures import DetectionBox, Pose

HT_MAGIC = b"HTNS"
HT_VERSION = 1

#: multi-scale evaluation factors applied to detection boxes
DEFAULT_SCALES = (0.7, 1.0, 1.3)


class AffineTransform:
    """2x3 affine map ``p' = A @ p + t``."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise InvalidInputError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("affine matrix must be finite")
        self.matrix = m

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    @classmethod
    def from_scale_translation(cls, sx, sy, tx, ty) -> "AffineTransform":
        return cls([[sx, 0.0, tx], [0.0, sy, ty]])

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def det(self) -> float:
        (a, b), (c, d) = self.linear
        return float(a * d - b * c)

    def is_invertible(self) -> bool:
        return abs(self.det) > 1e-12

    def inverse(self) -> "AffineTransform":
        if not self.is_invertible():
            raise InvalidInputError("affine transform is not invertible")
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.hstack([inv, -(inv @ self.translation)[:, None]]))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        lin = self.linear @ other.linear
        t = self.linear @ other.translation + self.translation
        return AffineTransform(np.hstack([lin, t[:, None]]))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    def allclose(self, other: "AffineTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __eq__(self, other):
        return isinstance(other, AffineTransform) and np.array_equal(self.matrix, other.matrix)

    def __repr__(self):
        return f"AffineTransform({self.matrix.tolist()})"


@dataclass(eq=False)
class Heatmap:
    values: np.ndarray
    transform: AffineTransform

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise InvalidInputError(f"heatmap values must be (J, H, W), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 2 or v.shape[2] < 2:
            raise InvalidInputError(f"heatmap too small: {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("heatmap values must be finite")
        if not self.transform.is_invertible():
            raise InvalidInputError("heatmap transform is not invertible")
        self.values = v

    @property
    def joints(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape


def validate_flip_pairs(pairs: Iterable[Tuple[int, int]], joints: Optional[int] = None):
    seen = set()
    out = []
    for a, b in pairs:
        a, b = int(a), int(b)
        if a == b or a in seen or b in seen:
            raise InvalidInputError(f"flip pair ({a}, {b}) repeats an index")
        if a < 0 or b < 0 or (joints is not None and (a >= joints or b >= joints)):
            raise InvalidInputError(f"flip pair ({a}, {b}) out of range for {joints} joints")
        seen.update((a, b))
        out.append((a, b))
    return out


def box_to_crop_transform(box: DetectionBox, aspect_w: int = 3, aspect_h: int = 4,
                          crop_w: int = 192, crop_h: int = 256,
                          scale: float = 1.0) -> AffineTransform:
    """Crop-pixel -> image-pixel transform for ``box``.

    The box is grown (never shrunk) about its center to ``aspect_w:aspect_h``,
    multiplied by ``scale`` and mapped onto a ``crop_w x crop_h`` crop.
    """
    w, h = box.x1 - box.x0, box.y1 - box.y0
    if not (w > 0 and h > 0):
        raise InvalidInputError("degenerate box")
    if crop_w <= 0 or crop_h <= 0 or aspect_w <= 0 or aspect_h <= 0:
        raise InvalidInputError("crop and aspect sizes must be positive")
    if not scale > 0:
        raise InvalidInputError("scale must be positive")
    ratio = aspect_w / aspect_h
    if w < h * ratio:
        w = h * ratio
    elif w > h * ratio:
        h = w / ratio
    w *= scale
    h *= scale
    cx, cy = box.center
    sx, sy = w / crop_w, h / crop_h
    return AffineTransform.from_scale_translation(
        sx, sy, cx - sx * crop_w / 2.0, cy - sy * crop_h / 2.0)


def crop_to_heatmap_transform(crop_transform: AffineTransform, crop_w: int, crop_h: int,
                              heatmap_w: int, heatmap_h: int) -> AffineTransform:
    """Heatmap-grid -> image transform from a crop -> image transform."""
    grid_to_crop = AffineTransform.from_scale_translation(
        crop_w / heatmap_w, crop_h / heatmap_h, 0.0, 0.0)
    return crop_transform.compose(grid_to_crop)


def heatmap_transform_for_box(box: DetectionBox, heatmap_w: int, heatmap_h: int,
                              crop_w: int = 192, crop_h: int = 256,
                              aspect_w: int = 3, aspect_h: int = 4,
                              scale: float = 1.0) -> AffineTransform:
    crop = box_to_crop_transform(box, aspect_w, aspect_h, crop_w, crop_h, scale)
    return crop_to_heatmap_transform(crop, crop_w, crop_h, heatmap_w, heatmap_h)


def flip_heatmap(h: Heatmap, pairs: Sequence[Tuple[int, int]] = (),
                 shift: bool = True) -> Heatmap:
    """Mirror horizontally and swap left/right channels.

    With ``shift`` the mirrored map moves one cell toward larger ``u`` with
    the first column replicated. Mirroring index ``m = W-1-u`` of a crop
    flipped about its center lands at ``W-u``, hence the one-cell offset.
    """
    pairs = validate_flip_pairs(pairs, h.joints)
    out = h.values[:, :, ::-1].copy()
    for a, b in pairs:
        out[[a, b]] = out[[b, a]]
    if shift:
        out[:, :, 1:] = out[:, :, :-1].copy()
    return Heatmap(out, h.transform)


def flip_back(h: Heatmap, pairs: Sequence[Tuple[int, int]] = (),
              shift: bool = True) -> Heatmap:
    """Bring a heatmap computed on a flipped crop back to the unflipped frame."""
    return flip_heatmap(h, pairs, shift=shift)


def fuse_heatmaps(hs: Sequence[Heatmap], weights: Optional[Sequence[float]] = None,
                  atol: float = 1e-9) -> Heatmap:
    """Weighted elementwise mean of aligned heatmaps."""
    if len(hs) == 0:
        raise InvalidInputError("no heatmaps to fuse")
    if weights is None:
        weights = [1.0] * len(hs)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(hs),):
        raise InvalidInputError("need exactly one weight per heatmap")
    if np.any(w < 0) or not w.sum() > 0:
        raise InvalidInputError("weights must be nonnegative with positive sum")
    ref = hs[0]
    for other in hs[1:]:
        if other.shape != ref.shape:
            raise InvalidInputError(f"heatmap shape mismatch {other.shape} vs {ref.shape}")
        if not other.transform.allclose(ref.transform, atol=atol):
            raise InvalidInputError("heatmap transforms differ; resample first")
    w = w / w.sum()
    fused = np.zeros_like(ref.values)
    for wi, hm in zip(w, hs):
        fused += wi * hm.values
    return Heatmap(fused, ref.transform)


def _bilinear(values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``(J, H, W)`` values at grid positions; outside ``[0, W-1] x [0, H-1]`` is 0."""
    J, H, W = values.shape
    inside = (xs >= 0) & (xs <= W - 1) & (ys >= 0) & (ys <= H - 1)
    xc = np.clip(xs, 0, W - 1)
    yc = np.clip(ys, 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), W - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), H - 2)
    fx = xc - x0
    fy = yc - y0
    v00 = values[:, y0, x0]
    v01 = values[:, y0, x0 + 1]
    v10 = values[:, y0 + 1, x0]
    v11 = values[:, y0 + 1, x0 + 1]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    return np.where(inside, out, 0.0)


def resample_heatmap(h: Heatmap, target_transform: AffineTransform,
                     target_h: int, target_w: int) -> Heatmap:
    """Bilinearly resample ``h`` onto another grid covering the same image."""
    if not target_transform.is_invertible():
        raise InvalidInputError("target transform is not invertible")
    if target_h < 2 or target_w < 2:
        raise InvalidInputError("target grid must be at least 2x2")
    to_source = h.transform.inverse().compose(target_transform)
    vv, uu = np.mgrid[0:target_h, 0:target_w].astype(np.float64)
    src = to_source.apply(np.stack([uu.ravel(), vv.ravel()], axis=1))
    # snap round-off so identical grids resample exactly
    src = np.where(np.abs(src - np.round(src)) < 1e-9, np.round(src), src)
    vals = _bilinear(h.values, src[:, 0], src[:, 1])
    return Heatmap(vals.reshape(h.joints, target_h, target_w), target_transform)


def decode_grid(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Arg-max with quarter-cell refinement, in grid coordinates.

    Returns ``(coords (J, 2) as (u, v), maxvals (J,))``. Ties pick the lowest
    row-major index; the quarter shift moves toward the larger neighbour on
    each axis and is skipped on equal neighbours or at the border.
    """
    values = np.asarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise InvalidInputError("heatmap contains NaN")
    J, H, W = values.shape
    flat = values.reshape(J, -1)
    idx = np.argmax(flat, axis=1)
    maxvals = flat[np.arange(J), idx]
    coords = np.empty((J, 2), dtype=np.float64)
    for j in range(J):
        v, u = divmod(int(idx[j]), W)
        hm = values[j]
        du = dv = 0.0
        if 0 < u < W - 1:
            diff = hm[v, u + 1] - hm[v, u - 1]
            du = 0.25 * np.sign(diff)
        if 0 < v < H - 1:
            diff = hm[v + 1, u] - hm[v - 1, u]
            dv = 0.25 * np.sign(diff)
        coords[j] = (u + du, v + dv)
    return coords, maxvals


def decode_keypoints(h: Heatmap) -> Pose:
    coords, maxvals = decode_grid(h.values)
    xy = h.transform.apply(coords)
    scores = np.clip(maxvals, 0.0, 1.0)
    kpts = np.column_stack([xy, scores])
    return Pose(kpts, score=float(scores.mean()))


def fuse_views(views: Sequence[Tuple[Heatmap, bool, float]], reference: AffineTransform,
               height: int, width: int, pairs: Sequence[Tuple[int, int]] = (),
               shift: bool = True) -> Heatmap:
    """Align (heatmap, flipped, weight) views onto one grid and average them.

    Flipped views are flipped back in their own grid first, then every view is
    resampled onto ``reference`` unless it already lives there.
    """
    aligned, weights = [], []
    for hm, flipped, weight in views:
        if flipped:
            hm = flip_back(hm, pairs, shift=shift)
        if not (hm.transform.allclose(reference) and hm.shape[1:] == (height, width)):
            hm = resample_heatmap(hm, reference, height, width)
        aligned.append(hm)
        weights.append(weight)
    return fuse_heatmaps(aligned, weights)


# -- binary tensor files ---------------------------------------------------

def write_ht(path: Union[str, PathLike], values: np.ndarray,
             transform: Optional[AffineTransform] = None) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim > 255:
        raise InvalidInputError("tensor rank too large")
    if transform is None:
        transform = AffineTransform.identity()
    header = HT_MAGIC + struct.pack("<BB", HT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<6d", *transform.matrix.ravel())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_ht(path: Union[str, PathLike]) -> Tuple[np.ndarray, AffineTransform]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != HT_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 6:
        raise InvalidInputError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<BB", data, 4)
    if version != HT_VERSION:
        raise InvalidInputError(f"{path}: unsupported tensor version {version}")
    off = 6
    need = off + 4 * rank + 48
    if len(data) < need:
        raise InvalidInputError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    matrix = np.array(struct.unpack_from("<6d", data, off)).reshape(2, 3)
    off += 48
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) != off + 4 * count:
        raise InvalidInputError(
            f"{path}: payload has {len(data) - off} bytes, expected {4 * count}")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
    return values.astype(np.float32), AffineTransform(matrix)


def save_heatmap(path, h: Heatmap) -> None:
    write_ht(path, h.values, h.transform)


def load_heatmap(path, index: Optional[int] = None) -> Heatmap:
    """Load a rank-3 file, or slice ``index`` out of a rank-4 ``(N, J, H, W)`` file."""
    values, tf = read_ht(path)
    if values.ndim == 4:
        if index is None:
            raise InvalidInputError(f"{path}: rank-4 tensor needs an index")
        if not 0 <= index < values.shape[0]:
            raise InvalidInputError(f"{path}: index {index} out of range")
        values = values[index]
    elif values.ndim == 3:
        if index not in (None, 0):
            raise InvalidInputError(f"{path}: index {index} out of range for rank-3 tensor")
    else:
        raise InvalidInputError(f"{path}: expected rank 3 or 4, got {values.ndim}")
    return Heatmap(values.astype(np.float64), tf)
