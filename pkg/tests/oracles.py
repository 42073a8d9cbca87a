"""Slow, independent reference implementations used as test oracles.

Nothing here imports the algorithm under test; geometry and scoring are
recomputed from scratch with plain loops.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def box_iou(a, b):
    """IoU of two (x0, y0, x1, y1) tuples."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def greedy_nms(coords, scores, threshold, proposal_ids=None):
    """O(n^2) greedy suppression; returns kept indices in visiting order."""
    n = len(coords)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for k in kept:
            same = (proposal_ids is not None and proposal_ids[i] is not None
                    and proposal_ids[i] == proposal_ids[k])
            if not same and box_iou(coords[i], coords[k]) > threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def emd_bruteforce(cost_fn, preds, gts):
    """Exhaustive min over permutations; ``cost_fn(pred, gt_or_None)``."""
    k = len(preds)
    targets = list(gts) + [None] * (k - len(gts))
    best = math.inf
    for perm in itertools.permutations(range(k)):
        total = 0.0
        for i in range(k):
            total += cost_fn(preds[i], targets[perm[i]])
        best = min(best, total)
    return best if k else 0.0


def ap_bruteforce(scores, tp, gt_count):
    """AP by enumerating every distinct score threshold.

    At threshold t, predictions with score >= t are accepted. Interpolated
    precision at recall r is the best precision among thresholds reaching
    recall >= r; area is summed over the distinct recall levels reached.
    """
    if gt_count == 0:
        return 1.0 if len(scores) == 0 else 0.0
    pts = []
    for t in sorted(set(scores), reverse=True):
        acc = [i for i in range(len(scores)) if scores[i] >= t]
        ntp = sum(1 for i in acc if tp[i])
        pts.append((ntp / gt_count, ntp / len(acc)))
    levels = sorted({r for r, _ in pts})
    area, prev = 0.0, 0.0
    for r in levels:
        if r == 0:
            continue
        p = max(pp for rr, pp in pts if rr >= r)
        area += (r - prev) * p
        prev = r
    return area


def best_assignment(aff):
    """Max-total one-to-one assignment by enumeration (rectangular allowed)."""
    aff = np.asarray(aff, dtype=np.float64)
    n, m = aff.shape
    best, best_pairs = -math.inf, None
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            total = sum(aff[i, cols[i]] for i in range(n))
            if total > best + 1e-12:
                best, best_pairs = total, [(i, cols[i]) for i in range(n)]
    else:
        for rows in itertools.permutations(range(n), m):
            total = sum(aff[rows[j], j] for j in range(m))
            if total > best + 1e-12:
                best, best_pairs = total, sorted((rows[j], j) for j in range(m))
    return best, best_pairs


def greedy_assignment_total(aff):
    """Repeatedly take the largest remaining entry."""
    aff = np.array(aff, dtype=np.float64)
    total = 0.0
    rows, cols = set(range(aff.shape[0])), set(range(aff.shape[1]))
    while rows and cols:
        i, j = max(((i, j) for i in rows for j in cols), key=lambda ij: aff[ij])
        total += aff[i, j]
        rows.discard(i)
        cols.discard(j)
    return total


def oks_direct(a_xy, a_s, b_xy, area, sigmas, vis_thr):
    vals = []
    for j in range(len(a_xy)):
        if a_s[j] < vis_thr:
            continue
        d2 = (a_xy[j][0] - b_xy[j][0]) ** 2 + (a_xy[j][1] - b_xy[j][1]) ** 2
        vals.append(math.exp(-d2 / (2.0 * area * (2.0 * sigmas[j]) ** 2)))
    return sum(vals) / len(vals) if vals else 0.0


def conv_decimate(img, kernel=(1, 4, 6, 4, 1)):
    """Direct 2D convolution with mirror borders, then keep even pixels."""
    k = np.outer(kernel, kernel).astype(np.float64)
    k /= k.sum()
    h, w = img.shape

    def mirror(i, n):
        while i < 0 or i >= n:
            i = -i if i < 0 else 2 * (n - 1) - i
        return i

    out = np.zeros((h // 2, w // 2))
    for oy in range(h // 2):
        for ox in range(w // 2):
            y, x = 2 * oy, 2 * ox
            acc = 0.0
            for dy in range(-2, 3):
                for dx in range(-2, 3):
                    acc += k[dy + 2, dx + 2] * img[mirror(y + dy, h), mirror(x + dx, w)]
            out[oy, ox] = acc
    return out


def bilinear_at(values, x, y):
    """Bilinear sample of a 2D array, 0 outside the cell-centre hull."""
    h, w = values.shape
    if x < 0 or y < 0 or x > w - 1 or y > h - 1:
        return 0.0
    x0, y0 = min(int(math.floor(x)), w - 2), min(int(math.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * values[y0, x0] + fx * (1 - fy) * values[y0, x0 + 1]
            + (1 - fx) * fy * values[y0 + 1, x0] + fx * fy * values[y0 + 1, x0 + 1])


def quarter_decode(channel):
    """Argmax (first in row-major order) plus a quarter step toward the larger neighbour."""
    h, w = channel.shape
    best, bu, bv = -math.inf, 0, 0
    for v in range(h):
        for u in range(w):
            if channel[v, u] > best:
                best, bu, bv = channel[v, u], u, v
    x, y = float(bu), float(bv)
    if 0 < bu < w - 1:
        if channel[bv, bu + 1] > channel[bv, bu - 1]:
            x += 0.25
        elif channel[bv, bu + 1] < channel[bv, bu - 1]:
            x -= 0.25
    if 0 < bv < h - 1:
        if channel[bv + 1, bu] > channel[bv - 1, bu]:
            y += 0.25
        elif channel[bv + 1, bu] < channel[bv - 1, bu]:
            y -= 0.25
    return x, y, best


def log_average(samples):
    if any(s <= 0 for s in samples):
        return 0.0
    return 100.0 * math.exp(sum(math.log(s) for s in samples) / len(samples))
