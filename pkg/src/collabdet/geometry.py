"""Oriented-box geometry shared by the simulator, the heads and the evaluator."""
from __future__ import annotations

import math

import numpy as np


def normalize_yaw(yaw):
    """Wrap angles into (-pi, pi]."""
    out = np.mod(np.asarray(yaw, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    out = np.where(out <= -math.pi, out + 2.0 * math.pi, out)
    return float(out) if np.ndim(out) == 0 else out


def bev_corners(cx: float, cy: float, length: float, width: float, yaw: float) -> np.ndarray:
    """Counter-clockwise BEV rectangle corners, shape (4, 2)."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the CCW convex polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_bev_iou(a, b) -> float:
    """BEV IoU of two yawed rectangles given as (cx, cy, length, width, yaw)."""
    ax, ay, al, aw, ayaw = (float(v) for v in a)
    bx, by, bl, bw, byaw = (float(v) for v in b)
    if al <= 0 or aw <= 0 or bl <= 0 or bw <= 0:
        raise ValueError(f"degenerate box: {a} / {b}")
    # bounding-circle rejection
    if math.hypot(ax - bx, ay - by) > 0.5 * (math.hypot(al, aw) + math.hypot(bl, bw)):
        return 0.0
    pa = bev_corners(ax, ay, al, aw, ayaw)
    pb = bev_corners(bx, by, bl, bw, byaw)
    inter = polygon_area(clip_convex(pa, pb))
    union = al * aw + bl * bw - inter
    return float(min(max(inter / union, 0.0), 1.0))


def box_bev(box) -> tuple[float, float, float, float, float]:
    """(cx, cy, l, w, yaw) view of any object with ``center``, ``size``, ``yaw``."""
    return (box.center[0], box.center[1], box.size[0], box.size[1], box.yaw)


def segment_box_entry(origin: np.ndarray, targets: np.ndarray, center, size, yaw: float) -> np.ndarray:
    """Parametric entry ``t`` of segments origin->target into an oriented 3-D box.

    Returns, per target, the smallest t in [0, 1] at which the segment is inside
    the box, or +inf when it never enters. ``targets`` is (n, 3).
    """
    c, s = math.cos(yaw), math.sin(yaw)
    rot_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot_t @ (np.asarray(origin, dtype=np.float64) - np.asarray(center, dtype=np.float64))
    d = (np.asarray(targets, dtype=np.float64) - np.asarray(center, dtype=np.float64)) @ rot_t.T - o
    half = np.asarray(size, dtype=np.float64) / 2.0
    t0 = np.zeros(len(d))
    t1 = np.ones(len(d))
    for ax in range(3):
        da = d[:, ax]
        par = np.abs(da) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half[ax] - o[ax]) / da
            tb = (half[ax] - o[ax]) / da
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        outside = par & (np.abs(o[ax]) > half[ax])
        lo = np.where(par, -np.inf, lo)
        hi = np.where(par, np.inf, hi)
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
        t1 = np.where(outside, -np.inf, t1)
    return np.where(t0 <= t1, t0, np.inf)
