"""Anchor-free detection head.

A dense class heatmap picks the top-k peak cells; their features (plus the
mining queries at the same cells) become object queries, refined by one
transformer decoder layer against the whole map, then decoded by separate
branches for centre offset, height, log-size, rotation and class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import NUM_CLASSES, HeadConfig, VoxelConfig
from .encoder import cell_centers
from .geometry import normalize_yaw, rotated_bev_iou
from .him import HEATMAP_PRIOR_BIAS
from .params import ParamSet, add_conv, add_linear, linear

BRANCHES = (("offset", 2), ("height", 1), ("dims", 3), ("rot", 2), ("cls", NUM_CLASSES))


@dataclass
class Detection:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int
    score: float

    @property
    def bev(self):
        return (self.center[0], self.center[1], self.size[0], self.size[1], self.yaw)

    def to_dict(self) -> dict:
        return {
            "class": self.class_id,
            "score": self.score,
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
        }


@dataclass
class HeadOutput:
    heatmap: nc.Tensor  # (K, H, W) logits
    cells: np.ndarray  # (top_k, 2) row, col
    regression: nc.Tensor  # (top_k, 8): offset 2, z 1, log dims 3, sin, cos
    class_logits: nc.Tensor  # (top_k, K)


def init_head(ps: ParamSet, rng, in_channels: int, query_channels: int, cfg: HeadConfig) -> None:
    d = cfg.model_dim
    add_conv(ps, rng, "head.input", in_channels, d, 1)
    add_conv(ps, rng, "head.hm_conv", d, d, 3)
    add_conv(ps, rng, "head.hm_out", d, NUM_CLASSES, 1)
    ps["head.hm_out.bias"].data[:] = HEATMAP_PRIOR_BIAS
    add_linear(ps, rng, "head.query", d + query_channels, d)
    add_linear(ps, rng, "head.pos", 2, d)
    for att in ("self", "cross"):
        for name in ("q", "k", "v", "out"):
            add_linear(ps, rng, f"head.{att}.{name}", d, d, bias=False)
    add_linear(ps, rng, "head.ffn1", d, 2 * d)
    add_linear(ps, rng, "head.ffn2", 2 * d, d)
    for name, dim in BRANCHES:
        add_linear(ps, rng, f"head.{name}", d, dim)
    ps["head.cls.bias"].data[:] = HEATMAP_PRIOR_BIAS


def attention(ps: ParamSet, prefix: str, x_q, x_kv, heads: int) -> nc.Tensor:
    """Multi-head attention of (Lq, D) queries over (Lk, D) keys/values."""
    lq, d = x_q.shape
    lk = x_kv.shape[0]
    dh = d // heads
    q = linear(ps, f"{prefix}.q", x_q).reshape(lq, heads, dh).transpose(1, 0, 2)
    k = linear(ps, f"{prefix}.k", x_kv).reshape(lk, heads, dh).transpose(1, 2, 0)
    v = linear(ps, f"{prefix}.v", x_kv).reshape(lk, heads, dh).transpose(1, 0, 2)
    att = nc.softmax(nc.matmul(q, k) * (1.0 / math.sqrt(dh)), axis=-1)
    out = nc.matmul(att, v).transpose(1, 0, 2).reshape(lq, d)
    return linear(ps, f"{prefix}.out", out)


def select_queries(prob: np.ndarray, top_k: int, kernel: int = 3) -> np.ndarray:
    """Top-k cells of the class-max probability map, peaks first.

    Ranking: peaks before non-peaks, then descending score, then row-major index.
    Returns (top_k, 2) array of (row, col).
    """
    k, h, w = prob.shape
    if top_k < 1 or top_k > h * w:
        raise ValueError(f"top_k={top_k} must be in [1, {h * w}]")
    best = prob.max(axis=0)
    peak = nc.max_pool_peaks(best, kernel).reshape(-1)
    flat = best.reshape(-1)
    order = np.lexsort((np.arange(h * w), -flat, ~peak))[:top_k]
    return np.column_stack([order // w, order % w])


def _positions(cells: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.column_stack([(cells[:, 1] + 0.5) / w - 0.5, (cells[:, 0] + 0.5) / h - 0.5]) * 2.0


def head_forward(f_in, query_map, ps: ParamSet, cfg: HeadConfig) -> HeadOutput:
    """``f_in`` is (Cin, H, W); ``query_map`` is (Cq, H, W) mining queries or zeros."""
    f_head = nc.conv2d(f_in, ps["head.input.weight"], ps["head.input.bias"])
    d, h, w = f_head.shape
    hm = nc.tanh(nc.conv2d(f_head, ps["head.hm_conv.weight"], ps["head.hm_conv.bias"]))
    heat = nc.conv2d(hm, ps["head.hm_out.weight"], ps["head.hm_out.bias"])
    cells = select_queries(nc._sigmoid(heat.data), cfg.top_k)
    r, c = cells[:, 0], cells[:, 1]
    tokens = f_head.reshape(d, h * w).transpose(1, 0)  # (HW, D)
    qmap = nc.as_tensor(query_map)
    cq = qmap.shape[0]
    flat_idx = r * w + c
    q_feat = nc.concat([tokens[flat_idx], qmap.reshape(cq, h * w).transpose(1, 0)[flat_idx]], axis=1)
    x = linear(ps, "head.query", q_feat) + linear(ps, "head.pos", _positions(cells, h, w))

    all_cells = np.column_stack([np.repeat(np.arange(h), w), np.tile(np.arange(w), h)])
    mem = tokens + linear(ps, "head.pos", _positions(all_cells, h, w))
    x = x + attention(ps, "head.self", x, x, cfg.heads)
    x = x + attention(ps, "head.cross", x, mem, cfg.heads)
    x = x + linear(ps, "head.ffn2", nc.tanh(linear(ps, "head.ffn1", x)))

    outs = {name: linear(ps, f"head.{name}", x) for name, _ in BRANCHES}
    reg = nc.concat([outs["offset"], outs["height"], outs["dims"], outs["rot"]], axis=1)
    return HeadOutput(heat, cells, reg, outs["cls"])


def decode_boxes(out: HeadOutput, vcfg: VoxelConfig) -> list[Detection]:
    """Turn every query into a detection (no thresholding or suppression)."""
    xs, ys = cell_centers(vcfg)
    cs = vcfg.cell_size
    reg = out.regression.data
    logits = out.class_logits.data
    dets = []
    for i, (r, c) in enumerate(out.cells):
        off, z, logd, rot = reg[i, 0:2], reg[i, 2], reg[i, 3:6], reg[i, 6:8]
        k = int(np.argmax(logits[i]))
        score = float(nc._sigmoid(np.array([logits[i, k]]))[0])
        dets.append(Detection(
            center=(float(xs[c] + off[0] * cs), float(ys[r] + off[1] * cs), float(z)),
            size=tuple(float(v) for v in np.exp(logd)),
            yaw=normalize_yaw(math.atan2(rot[0], rot[1])),
            class_id=k,
            score=score,
        ))
    return dets


def nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Class-aware greedy suppression by rotated BEV IoU; stable in input order on ties."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or rotated_bev_iou(k.bev, d.bev) <= iou_thr for k in kept):
            kept.append(d)
    return kept


def decode(out: HeadOutput, vcfg: VoxelConfig, cfg: HeadConfig) -> list[Detection]:
    dets = [d for d in decode_boxes(out, vcfg) if d.score >= cfg.score_threshold]
    return nms(dets, cfg.nms_iou)
