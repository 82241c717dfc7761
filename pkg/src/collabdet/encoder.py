"""Voxelisation and the shared BEV feature encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import VoxelConfig
from .params import ParamSet, add_conv, add_linear, linear

DESCRIPTOR_DIM = 6


@dataclass
class VoxelSet:
    """Occupied voxels: integer coords (ix, iy, iz), kept points and counts."""

    coords: np.ndarray  # (V, 3) int64
    points: np.ndarray  # (V, max_points, 4), zero padded
    counts: np.ndarray  # (V,) int64


@dataclass
class BEVFeatureMap:
    agent_id: int
    features: nc.Tensor  # (C, H, W)
    cell_size_m: float


def voxelize(points: np.ndarray, cfg: VoxelConfig) -> VoxelSet:
    """Bin points into voxels, keeping at most ``max_points_per_voxel`` each.

    Points are sorted lexicographically by (x, y, z, intensity) before capping,
    so the result does not depend on input order. Intervals are half-open.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    nx, ny, nz = cfg.grid_voxels
    mins = np.array([cfg.range_xy[0], cfg.range_xy[0], cfg.range_z[0]])
    idx = np.floor((pts[:, :3] - mins) / np.array(cfg.voxel_size)).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.array([nx, ny, nz])), axis=1)
    pts, idx = pts[ok], idx[ok]
    cap = cfg.max_points_per_voxel
    if len(pts) == 0:
        return VoxelSet(np.zeros((0, 3), np.int64), np.zeros((0, cap, 4)), np.zeros(0, np.int64))
    lin = (idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], lin))
    pts, idx, lin = pts[order], idx[order], lin[order]
    starts = np.flatnonzero(np.r_[True, lin[1:] != lin[:-1]])
    group = np.cumsum(np.r_[True, lin[1:] != lin[:-1]]) - 1
    rank = np.arange(len(pts)) - starts[group]
    keep = rank < cap
    nvox = len(starts)
    out = np.zeros((nvox, cap, 4))
    out[group[keep], rank[keep]] = pts[keep]
    counts = np.minimum(np.diff(np.r_[starts, len(pts)]), cap)
    return VoxelSet(idx[starts], out, counts)


def voxel_descriptors(vox: VoxelSet, cfg: VoxelConfig) -> np.ndarray:
    """Per voxel: mean xyz offset from the voxel centre (voxel units), mean
    intensity, fill ratio, and the voxel's normalised height in the z range."""
    if len(vox.counts) == 0:
        return np.zeros((0, DESCRIPTOR_DIM))
    vs = np.array(cfg.voxel_size)
    mins = np.array([cfg.range_xy[0], cfg.range_xy[0], cfg.range_z[0]])
    centers = mins + (vox.coords + 0.5) * vs
    n = vox.counts[:, None].astype(np.float64)
    mean = vox.points.sum(axis=1) / n
    offset = (mean[:, :3] - centers) / vs
    fill = vox.counts / cfg.max_points_per_voxel
    nz = cfg.grid_voxels[2]
    height = 2.0 * (vox.coords[:, 2] + 0.5) / nz - 1.0
    return np.column_stack([offset, mean[:, 3], fill, height])


def init_encoder(ps: ParamSet, rng, cfg: VoxelConfig) -> None:
    add_linear(ps, rng, "enc.voxel", DESCRIPTOR_DIM, cfg.voxel_channels)
    add_linear(ps, rng, "enc.pillar", cfg.voxel_channels + 2, cfg.channels)
    add_conv(ps, rng, "enc.conv", cfg.channels, cfg.channels, 3, bias=False)


def encode(vox: VoxelSet, ps: ParamSet, cfg: VoxelConfig, agent_id: int = 0) -> BEVFeatureMap:
    """Voxel MLP -> max over each z column -> max over each BEV cell -> 3x3 conv."""
    feat = encode_batch([vox], ps, cfg)
    return BEVFeatureMap(agent_id, feat[0], cfg.cell_size)


def encode_batch(voxsets: list[VoxelSet], ps: ParamSet, cfg: VoxelConfig) -> nc.Tensor:
    """Encode several agents with the same weights; returns (B, C, H, W)."""
    h, w = cfg.bev_shape
    c = cfg.channels
    b = len(voxsets)
    nx = cfg.grid_voxels[0]
    ds = cfg.downsample
    total = sum(len(v.counts) for v in voxsets)
    if total == 0:
        return nc.Tensor(np.zeros((b, c, h, w)))
    desc = np.concatenate([voxel_descriptors(v, cfg) for v in voxsets])
    coords = np.concatenate([v.coords for v in voxsets])
    agent = np.concatenate([np.full(len(v.counts), i, dtype=np.int64) for i, v in enumerate(voxsets)])
    x = nc.tanh(linear(ps, "enc.voxel", desc))

    pillar_lin = (agent * cfg.grid_voxels[1] + coords[:, 1]) * nx + coords[:, 0]
    pillar_ids, pillar_of_voxel = np.unique(pillar_lin, return_inverse=True)
    pil = nc.segment_max(x, pillar_of_voxel, len(pillar_ids))
    px = pillar_ids % nx
    py = (pillar_ids // nx) % cfg.grid_voxels[1]
    pa = pillar_ids // (nx * cfg.grid_voxels[1])
    sub = np.column_stack([((px % ds) + 0.5) / ds - 0.5, ((py % ds) + 0.5) / ds - 0.5])
    pil = nc.tanh(linear(ps, "enc.pillar", nc.concat([pil, sub], axis=1)))

    cell_lin = (pa * h + py // ds) * w + (px // ds)
    cell_ids, cell_of_pillar = np.unique(cell_lin, return_inverse=True)
    cells = nc.segment_max(pil, cell_of_pillar, len(cell_ids))
    grid = nc.scatter_rows(cells, cell_ids, b * h * w)
    bev = grid.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    return nc.tanh(nc.conv2d(bev, ps["enc.conv.weight"]))


def cell_centers(cfg: VoxelConfig) -> tuple[np.ndarray, np.ndarray]:
    """x of each column and y of each row of the BEV grid (metres, ego frame)."""
    h, w = cfg.bev_shape
    cs = cfg.cell_size
    xs = cfg.range_xy[0] + (np.arange(w) + 0.5) * cs
    ys = cfg.range_xy[0] + (np.arange(h) + 0.5) * cs
    return xs, ys


def world_to_cell(x: float, y: float, cfg: VoxelConfig) -> tuple[int, int] | None:
    """(row, col) of the BEV cell containing (x, y), or None outside the grid."""
    h, w = cfg.bev_shape
    col = int(np.floor((x - cfg.range_xy[0]) / cfg.cell_size))
    row = int(np.floor((y - cfg.range_xy[0]) / cfg.cell_size))
    if 0 <= row < h and 0 <= col < w:
        return row, col
    return None
