"""Multi-stage hard instance mining.

Each stage masks the cached input features wherever an earlier stage claimed an
object, re-extracts features with a stage-specific convolution, and predicts a
class heatmap with a detector shared by all stages. Claimed cells come from a
Hungarian match against ground truth while training and from peak/threshold
filtering at inference. The stage features are concatenated into the queries
consumed by fusion.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numcore as nc
from .config import NUM_CLASSES, HimConfig, VoxelConfig
from .encoder import cell_centers
from .geometry import rotated_bev_iou
from .params import ParamSet, add_conv

HEATMAP_PRIOR_BIAS = -2.19


@dataclass
class Prediction:
    row: int
    col: int
    class_id: int
    score: float
    center: tuple[float, float]


@dataclass
class StageOutput:
    features: nc.Tensor  # (B, C, H, W)
    heatmap: nc.Tensor  # (B, K, H, W) logits
    predictions: list[list[Prediction]]  # per agent
    stage_mask: np.ndarray  # (B, K, H, W) bool
    incoming_mask: np.ndarray  # (B, K, H, W) bool, M_acc before this stage
    masked_input: nc.Tensor | None = None  # (B, C, H, W), what the extractor saw


@dataclass
class QuerySet:
    per_stage: list[nc.Tensor]  # n_stages x (B, C, H, W)
    combined: nc.Tensor  # (B, n_stages*C, H, W)


def init_him(ps: ParamSet, rng, channels: int, cfg: HimConfig) -> None:
    for s in range(cfg.n_stages):
        add_conv(ps, rng, f"him.extract{s}", channels, channels, 3)
    add_conv(ps, rng, "him.detect", channels, NUM_CLASSES, 1)
    ps["him.detect.bias"].data[:] = HEATMAP_PRIOR_BIAS


def stage_threshold(s: int, cfg: HimConfig) -> float:
    if cfg.threshold_decay:
        return cfg.tau * cfg.gamma ** (-s)
    return cfg.tau * cfg.gamma**s


def filter_mask(heatmap, s: int, cfg: HimConfig) -> np.ndarray:
    """Cells that are local peaks and whose sigmoid exceeds the stage threshold."""
    if not 0 <= s < cfg.n_stages:
        raise ValueError(f"stage {s} outside [0, {cfg.n_stages})")
    logits = heatmap.data if isinstance(heatmap, nc.Tensor) else np.asarray(heatmap, dtype=np.float64)
    prob = nc._sigmoid(logits)
    return nc.max_pool_peaks(prob, cfg.peak_kernel) & (prob > stage_threshold(s, cfg))


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of rows to columns (rectangular allowed)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def match_cost(scores: np.ndarray, pred_xy: np.ndarray, gt_xy: np.ndarray, center_weight: float) -> np.ndarray:
    """(1 - class score) + center_weight * L1 centre distance in metres."""
    dist = np.abs(pred_xy[:, None, :] - gt_xy[None, :, :]).sum(axis=-1)
    return (1.0 - scores)[:, None] + center_weight * dist


def match_mask(preds: list[Prediction], gt, tau_iou: float, shape, center_weight: float = 0.25) -> np.ndarray:
    """Class-aware mask of prediction cells whose Hungarian partner overlaps above ``tau_iou``.

    IoU is measured between the ground-truth footprint and the same footprint
    re-centred on the predicted cell, since stage predictions carry no size.
    """
    mask = np.zeros(shape, dtype=bool)
    if not preds or not gt:
        return mask
    for k in range(shape[0]):
        pk = [p for p in preds if p.class_id == k]
        gk = [g for g in gt if g.class_id == k]
        if not pk or not gk:
            continue
        cost = match_cost(
            np.array([p.score for p in pk]),
            np.array([p.center for p in pk]),
            np.array([g.center[:2] for g in gk]),
            center_weight,
        )
        for i, j in hungarian(cost):
            g = gk[j]
            moved = (pk[i].center[0], pk[i].center[1], g.size[0], g.size[1], g.yaw)
            if rotated_bev_iou(moved, g.bev) > tau_iou:
                mask[k, pk[i].row, pk[i].col] = True
    return mask


def stage_predictions(prob: np.ndarray, spatial_mask: np.ndarray, cfg: HimConfig, xs, ys) -> list[Prediction]:
    """Unmasked peak cells of one agent's (K, H, W) probability map, best first."""
    peaks = nc.max_pool_peaks(prob, cfg.peak_kernel) & ~spatial_mask[None]
    k, r, c = np.nonzero(peaks)
    scores = prob[k, r, c]
    # score descending, then class, then row-major cell
    order = np.lexsort((c, r, k, -scores))[: cfg.max_predictions]
    return [
        Prediction(int(r[i]), int(c[i]), int(k[i]), float(scores[i]), (float(xs[c[i]]), float(ys[r[i]])))
        for i in order
    ]


def run_him(features, ps: ParamSet, cfg: HimConfig, vcfg: VoxelConfig, gt=None, mode: str = "infer",
            center_weight: float = 0.25) -> tuple[QuerySet, list[StageOutput]]:
    """Run every mining stage on a batch of agent maps shaped (B, C, H, W).

    A single (C, H, W) map is treated as a batch of one. ``gt`` is the list of
    ground-truth boxes in the shared ego frame (required when ``mode='train'``).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and gt is None:
        raise ValueError("training mode needs ground-truth boxes")
    f_orig = nc.as_tensor(features)
    if f_orig.ndim == 3:
        f_orig = f_orig.reshape((1,) + f_orig.shape)
    b, _, h, w = f_orig.shape
    xs, ys = cell_centers(vcfg)
    m_acc = np.zeros((b, NUM_CLASSES, h, w), dtype=bool)
    stages: list[StageOutput] = []
    for s in range(cfg.n_stages):
        spatial = m_acc.any(axis=1)
        f_masked = f_orig * (~spatial)[:, None].astype(np.float64)
        f_hat = nc.tanh(nc.conv2d(f_masked, ps[f"him.extract{s}.weight"], ps[f"him.extract{s}.bias"]))
        heat = nc.conv2d(f_hat, ps["him.detect.weight"], ps["him.detect.bias"])
        prob = nc._sigmoid(heat.data)
        preds = [stage_predictions(prob[i], spatial[i], cfg, xs, ys) for i in range(b)]
        if mode == "train":
            t_s = np.stack([
                match_mask(preds[i], gt, cfg.tau_iou, (NUM_CLASSES, h, w), center_weight) for i in range(b)
            ])
        else:
            t_s = filter_mask(heat.data, s, cfg) & ~spatial[:, None]
        stages.append(StageOutput(f_hat, heat, preds, t_s, m_acc.copy(), f_masked))
        m_acc = m_acc | t_s
    per_stage = [st.features for st in stages]
    return QuerySet(per_stage, nc.concat(per_stage, axis=1)), stages


def write_pgm(path, prob: np.ndarray) -> None:
    """8-bit binary PGM, value round(255 * prob), first row written first."""
    img = np.rint(255.0 * np.clip(prob, 0.0, 1.0)).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5 {w} {h} 255\n".encode("ascii") + img.tobytes())


def dump_heatmaps(stages: list[StageOutput], agent_ids, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s, st in enumerate(stages):
        prob = nc._sigmoid(st.heatmap.data)
        for i, aid in enumerate(agent_ids):
            for k in range(prob.shape[1]):
                path = out_dir / f"agent{aid}_stage{s}_class{k}.pgm"
                write_pgm(path, prob[i, k])
                written.append(path)
    return written
