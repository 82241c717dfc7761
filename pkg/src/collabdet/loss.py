"""Joint training objective and target construction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import NUM_CLASSES, LossConfig, VoxelConfig
from .encoder import cell_centers, world_to_cell
from .him import hungarian, match_cost

PROB_EPS = 1e-7


@dataclass
class LossBreakdown:
    cls: nc.Tensor
    bbox: nc.Tensor
    hm: nc.Tensor
    him: list[nc.Tensor]
    total: nc.Tensor
    lambdas: tuple[float, float, float, float]

    def values(self) -> dict:
        return {
            "L_cls": float(self.cls.data),
            "L_bbox": float(self.bbox.data),
            "L_hm": float(self.hm.data),
            "L_him": [float(h.data) for h in self.him],
            "total": float(self.total.data),
        }


def _prob(p) -> nc.Tensor:
    return nc.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def focal_loss(p, target, alpha: float = 0.25, gamma: float = 2.0) -> nc.Tensor:
    """Elementwise sigmoid focal loss, summed. ``target`` is a 0/1 array."""
    p = _prob(p)
    t = np.asarray(target, dtype=np.float64)
    pos = -alpha * (1.0 - p) ** gamma * nc.log(p)
    neg = -(1.0 - alpha) * p**gamma * nc.log(1.0 - p)
    return (pos * t + neg * (1.0 - t)).sum()


def l1_box_loss(pred, target) -> nc.Tensor:
    """Mean absolute error over matched rows of (n, 8) regression targets."""
    pred = nc.as_tensor(pred)
    if pred.shape[0] == 0:
        return nc.Tensor(0.0)
    return nc.absolute(pred - np.asarray(target, dtype=np.float64)).mean()


def gaussian_radius(height: float, width: float, min_overlap: float = 0.1) -> float:
    """Largest centre shift (cells) keeping IoU >= ``min_overlap`` for an h x w box."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def box_radius_cells(box, vcfg: VoxelConfig, min_overlap: float = 0.1) -> int:
    cs = vcfg.cell_size
    return max(int(gaussian_radius(box.size[0] / cs, box.size[1] / cs, min_overlap)), 1)


def gaussian_heatmap_target(boxes, vcfg: VoxelConfig, min_overlap: float = 0.1) -> np.ndarray:
    """(K, H, W) target: one max-combined Gaussian per box, peaking at 1 on its centre cell."""
    h, w = vcfg.bev_shape
    target = np.zeros((NUM_CLASSES, h, w))
    for box in boxes:
        cell = world_to_cell(box.center[0], box.center[1], vcfg)
        if cell is None:
            continue
        r0, c0 = cell
        rad = box_radius_cells(box, vcfg, min_overlap)
        sigma = (2 * rad + 1) / 6.0
        rows = np.arange(max(r0 - rad, 0), min(r0 + rad + 1, h))
        cols = np.arange(max(c0 - rad, 0), min(c0 + rad + 1, w))
        dy = (rows - r0)[:, None]
        dx = (cols - c0)[None, :]
        g = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
        plane = target[box.class_id]
        plane[np.ix_(rows, cols)] = np.maximum(plane[np.ix_(rows, cols)], g)
    return target


def gaussian_focal_loss(pred, target) -> nc.Tensor:
    """Penalty-reduced focal loss normalised by the number of exact-1 target cells."""
    p = _prob(pred)
    t = np.asarray(target, dtype=np.float64)
    pos = t == 1.0
    pos_term = -((1.0 - p) ** 2) * nc.log(p)
    neg_term = -((1.0 - t) ** 4) * p**2 * nc.log(1.0 - p)
    total = (pos_term * pos.astype(np.float64) + neg_term * (~pos).astype(np.float64)).sum()
    return total * (1.0 / max(int(pos.sum()), 1))


def unclaimed_boxes(boxes, incoming_mask: np.ndarray, vcfg: VoxelConfig) -> list:
    """Boxes whose centre cell is not yet set in their class plane of ``incoming_mask``."""
    keep = []
    for b in boxes:
        cell = world_to_cell(b.center[0], b.center[1], vcfg)
        if cell is None or not incoming_mask[b.class_id, cell[0], cell[1]]:
            keep.append(b)
    return keep


def him_stage_loss(heatmap_logits, incoming_mask: np.ndarray, boxes, vcfg: VoxelConfig,
                   min_overlap: float = 0.1) -> nc.Tensor:
    """Heatmap loss of one stage for one agent, supervised only on unclaimed objects."""
    target = gaussian_heatmap_target(unclaimed_boxes(boxes, incoming_mask, vcfg), vcfg, min_overlap)
    return gaussian_focal_loss(nc.sigmoid(heatmap_logits), target)


def regression_targets(boxes, cells: np.ndarray, vcfg: VoxelConfig) -> np.ndarray:
    """(n, 8) targets of ``boxes`` relative to the query ``cells`` they were matched to."""
    xs, ys = cell_centers(vcfg)
    cs = vcfg.cell_size
    rows = []
    for b, (r, c) in zip(boxes, cells):
        rows.append([
            (b.center[0] - xs[c]) / cs,
            (b.center[1] - ys[r]) / cs,
            b.center[2],
            math.log(b.size[0]),
            math.log(b.size[1]),
            math.log(b.size[2]),
            math.sin(b.yaw),
            math.cos(b.yaw),
        ])
    return np.array(rows, dtype=np.float64).reshape(-1, 8)


def assign_queries(head_out, boxes, vcfg: VoxelConfig, center_weight: float = 0.25) -> list[tuple[int, int]]:
    """Hungarian pairs (query, box) on class score and centre distance."""
    if not boxes:
        return []
    xs, ys = cell_centers(vcfg)
    cs = vcfg.cell_size
    cells = head_out.cells
    off = head_out.regression.data[:, 0:2]
    pred_xy = np.column_stack([xs[cells[:, 1]] + off[:, 0] * cs, ys[cells[:, 0]] + off[:, 1] * cs])
    prob = nc._sigmoid(head_out.class_logits.data)
    gt_xy = np.array([b.center[:2] for b in boxes])
    cost = np.zeros((len(cells), len(boxes)))
    for j, b in enumerate(boxes):
        cost[:, j] = match_cost(prob[:, b.class_id], pred_xy, gt_xy[j:j + 1], center_weight)[:, 0]
    return hungarian(cost)


def total_loss(head_out, stages, boxes, vcfg: VoxelConfig, cfg: LossConfig) -> LossBreakdown:
    """Weighted sum of query classification, box regression, dense heatmap and
    per-stage mining losses. ``stages`` may be empty when mining is disabled;
    stage tensors carry one batch row per valid agent."""
    lam = cfg.lambdas
    pairs = assign_queries(head_out, boxes, vcfg, cfg.match_center_weight)
    n_q = head_out.class_logits.shape[0]
    cls_target = np.zeros((n_q, NUM_CLASSES))
    for qi, bj in pairs:
        cls_target[qi, boxes[bj].class_id] = 1.0
    l_cls = focal_loss(nc.sigmoid(head_out.class_logits), cls_target, cfg.focal_alpha, cfg.focal_gamma)
    l_cls = l_cls * (1.0 / max(len(pairs), 1))

    if pairs:
        qi = np.array([p[0] for p in pairs])
        matched = [boxes[p[1]] for p in pairs]
        l_bbox = l1_box_loss(head_out.regression[qi], regression_targets(matched, head_out.cells[qi], vcfg))
    else:
        l_bbox = nc.Tensor(0.0)

    hm_target = gaussian_heatmap_target(boxes, vcfg, cfg.min_overlap)
    l_hm = gaussian_focal_loss(nc.sigmoid(head_out.heatmap), hm_target)

    l_him = []
    for st in stages:
        n_agents = st.heatmap.shape[0]
        per_agent = [
            him_stage_loss(st.heatmap[i], st.incoming_mask[i], boxes, vcfg, cfg.min_overlap)
            for i in range(n_agents)
        ]
        acc = per_agent[0]
        for extra in per_agent[1:]:
            acc = acc + extra
        l_him.append(acc * (1.0 / n_agents))

    total = l_cls * lam[0] + l_bbox * lam[1] + l_hm * lam[2]
    for lh in l_him:
        total = total + lh * lam[3]
    return LossBreakdown(l_cls, l_bbox, l_hm, l_him, total, lam)
