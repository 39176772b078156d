"""Slow, direct reference implementations used to check the vectorised code."""
from __future__ import annotations

import math
from collections import deque
from fractions import Fraction

import numpy as np


def blend_pixel(i_n: float, a: float, m: float, beta: float) -> float:
    v = beta * (m * a) + (1 - beta) * (m * i_n) + (1 - m) * i_n
    return min(max(v, 0.0), 1.0)


def cosine(u, v, eps=1e-8) -> float:
    dot = sum(float(x) * float(y) for x, y in zip(u, v))
    nu = max(math.sqrt(sum(float(x) ** 2 for x in u)), eps)
    nv = max(math.sqrt(sum(float(y) ** 2 for y in v)), eps)
    return dot / (nu * nv)


def focal_scalar(y: float, m: float, gamma: float, eps: float = 1e-8) -> float:
    y = min(max(y, eps), 1 - eps)
    p = m * y + (1 - m) * (1 - y)
    return -((1 - p) ** gamma) * math.log(p)


def central_difference(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` by central differences, float64."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += step
        lo[idx] -= step
        grad[idx] = (fn(hi) - fn(lo)) / (2 * step)
    return grad


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling, edge-clamped, no antialiasing."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))

    def coords(i, n_in, n_out):
        c = (i + 0.5) * n_in / n_out - 0.5
        c = max(c, 0.0)
        i0 = min(int(math.floor(c)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    for i in range(out_h):
        y0, y1, fy = coords(i, h, out_h)
        for j in range(out_w):
            x0, x1, fx = coords(j, w, out_w)
            top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
            bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bottom * fy
    return out


def flood_fill_regions(mask: np.ndarray, adjacency: int = 8) -> list[set[tuple[int, int]]]:
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    seen = np.zeros_like(mask)
    if adjacency == 8:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    regions = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            region, queue = set(), deque([(sy, sx)])
            seen[sy, sx] = True
            while queue:
                y, x = queue.popleft()
                region.add((y, x))
                for dy, dx in steps:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            regions.append(region)
    return regions


def auc_threshold_sweep(scores, labels) -> float:
    """ROC area by sweeping every threshold and integrating trapezoids in exact arithmetic."""
    scores = [float(s) for s in np.ravel(scores)]
    labels = [bool(v) for v in np.ravel(labels)]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    pts = [(Fraction(0), Fraction(0))]
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and not l)
        pts.append((Fraction(fp, n_neg), Fraction(tp, n_pos)))
    area = sum((x1 - x0) * (y1 + y0) / 2 for (x0, y0), (x1, y1) in zip(pts, pts[1:]))
    return float(area)


def ap_threshold_sweep(scores, labels) -> float:
    """Step-sum average precision, one explicit thresholding per distinct score."""
    scores = np.ravel(np.asarray(scores, dtype=np.float64))
    labels = np.ravel(np.asarray(labels)).astype(bool)
    n_pos = int(labels.sum())
    terms, prev_tp = [], 0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        terms.append(((tp - prev_tp) / n_pos) * (tp / (tp + fp)))
        prev_tp = tp
    return math.fsum(terms)


def iap_threshold_sweep(predictions, gts, k: float = 90.0):
    """Instance AP by brute force: flood-fill regions, re-threshold at every distinct value."""
    regions = []
    for idx, g in enumerate(gts):
        regions += [(idx, r) for r in flood_fill_regions(g, 8)]
    n_inst = len(regions)
    preds = [np.asarray(p, dtype=np.float64) for p in predictions]
    values = sorted(set(np.concatenate([p.ravel() for p in preds]).tolist()), reverse=True)
    terms, prev_found, points = [], 0, []
    for t in values:
        found = 0
        for idx, region in regions:
            hits = sum(1 for (y, x) in region if preds[idx][y, x] >= t)
            if 2 * hits > len(region):
                found += 1
        tp = sum(int(((p >= t) & (np.asarray(g) > 0)).sum()) for p, g in zip(preds, gts))
        fp = sum(int(((p >= t) & ~(np.asarray(g) > 0)).sum()) for p, g in zip(preds, gts))
        precision = tp / (tp + fp)
        terms.append(((found - prev_found) / n_inst) * precision)
        points.append((found, precision))
        prev_found = found
    at_k = max(p for f, p in points if f * 100.0 >= k * n_inst)
    return math.fsum(terms), at_k
