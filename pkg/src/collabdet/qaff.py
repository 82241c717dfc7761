"""Query-guided fusion of per-agent features.

Per stage, agents attend to each other cell by cell (agents are the tokens).
Stage outputs are mixed with scene-level softmax weights, and the mixed query
of each agent cross-attends over a small spatial neighbourhood of that agent's
own key/value map. Agents are finally combined with masked softmax weights.
Invalid agents are zeroed on entry, so nothing about them can leak out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import QaffConfig
from .params import ParamSet, add_linear, linear


@dataclass
class FusedFeatures:
    fused: nc.Tensor  # (C, H, W)
    stage_weights: nc.Tensor  # (S,)
    agent_weights: nc.Tensor  # (N,)
    refined: list[nc.Tensor]  # per stage (N, C, H, W)
    cross: nc.Tensor  # (N, C, H, W)


def init_qaff(ps: ParamSet, rng, channels: int, n_stages: int, cfg: QaffConfig) -> None:
    d = cfg.model_dim
    for s in range(n_stages):
        for name in ("q", "k", "v"):
            add_linear(ps, rng, f"qaff.mhsa{s}.{name}", channels, d, bias=False)
        add_linear(ps, rng, f"qaff.mhsa{s}.out", d, channels, bias=False)
    add_linear(ps, rng, "qaff.stage_score", channels, 1)
    for name in ("q", "k", "v"):
        add_linear(ps, rng, f"qaff.mhca.{name}", channels, d, bias=False)
    add_linear(ps, rng, "qaff.mhca.out", d, channels, bias=False)
    add_linear(ps, rng, "qaff.agent_score", channels, 1)


def _valid(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if not m.any():
        raise ValueError("no valid agents")
    return m


def cross_agent_mhsa(queries, mask, ps: ParamSet, stage: int, heads: int) -> nc.Tensor:
    """Self-attention over agents at every cell. ``queries`` is (N, C, H, W)."""
    m = _valid(mask)
    q_in = nc.as_tensor(queries) * m[:, None, None, None].astype(np.float64)
    n, c, h, w = q_in.shape
    x = q_in.reshape(n, c, h * w).transpose(2, 0, 1)  # (HW, N, C)
    pre = f"qaff.mhsa{stage}"
    d = ps[f"{pre}.q.weight"].shape[1]
    dh = d // heads

    def split(t):
        return t.reshape(h * w, n, heads, dh).transpose(0, 2, 1, 3)  # (HW, h, N, dh)

    q = split(linear(ps, f"{pre}.q", x))
    k = split(linear(ps, f"{pre}.k", x))
    v = split(linear(ps, f"{pre}.v", x))
    scores = nc.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    att = nc.masked_softmax(scores, m[None, None, None, :], axis=-1)
    out = nc.matmul(att, v).transpose(0, 2, 1, 3).reshape(h * w, n, d)
    out = linear(ps, f"{pre}.out", out) * m[None, :, None].astype(np.float64)
    return out.transpose(1, 2, 0).reshape(n, c, h, w)


def _masked_mean_pool(x: nc.Tensor, m: np.ndarray) -> nc.Tensor:
    """Mean over valid agents and all cells of (N, C, H, W) -> (C,)."""
    n, c, h, w = x.shape
    pooled = (x * m[:, None, None, None].astype(np.float64)).sum(axis=(0, 2, 3))
    return pooled * (1.0 / (m.sum() * h * w))


def stage_weights(refined: list, mask, ps: ParamSet) -> nc.Tensor:
    """Softmax over stages of a linear score of each stage's pooled query."""
    m = _valid(mask)
    scores = [linear(ps, "qaff.stage_score", _masked_mean_pool(q, m).reshape(1, -1)).reshape(1) for q in refined]
    return nc.softmax(nc.concat(scores, axis=0), axis=0)


def neighborhood_cross_attention(query, features, mask, ps: ParamSet, heads: int, k: int = 3) -> nc.Tensor:
    """Each agent's query at a cell attends over the k×k neighbourhood of that
    agent's own key/value map. Inputs are (N, C, H, W); returns (N, C, H, W)."""
    m = _valid(mask)
    mf = m[:, None, None, None].astype(np.float64)
    query = nc.as_tensor(query) * mf
    features = nc.as_tensor(features) * mf
    n, c, h, w = features.shape
    d = ps["qaff.mhca.q.weight"].shape[1]
    dh = d // heads
    qx = query.reshape(n, c, h * w).transpose(0, 2, 1)  # (N, HW, C)
    fx = features.transpose(0, 2, 3, 1)  # (N, H, W, C)
    q = linear(ps, "qaff.mhca.q", qx).reshape(n, h * w, 1, heads, dh)
    kk = linear(ps, "qaff.mhca.k", fx)
    vv = linear(ps, "qaff.mhca.v", fx)
    kn, valid = nc.unfold_neighbors(kk, k)  # (N, H, W, k*k, D)
    vn, _ = nc.unfold_neighbors(vv, k)
    kn = kn.reshape(n, h * w, k * k, heads, dh)
    vn = vn.reshape(n, h * w, k * k, heads, dh)
    scores = (q * kn).sum(axis=-1) * (1.0 / math.sqrt(dh))  # (N, HW, k*k, heads)
    att = nc.masked_softmax(scores, valid.reshape(1, h * w, k * k, 1), axis=2)
    out = (att.reshape(n, h * w, k * k, heads, 1) * vn).sum(axis=2).reshape(n, h * w, d)
    out = linear(ps, "qaff.mhca.out", out) * m[:, None, None].astype(np.float64)
    return out.transpose(0, 2, 1).reshape(n, c, h, w)


def agent_weights(cross, mask, ps: ParamSet) -> nc.Tensor:
    """Masked softmax over agents of a linear score of each agent's pooled map."""
    m = _valid(mask)
    pooled = cross.mean(axis=(2, 3))  # (N, C)
    scores = linear(ps, "qaff.agent_score", pooled).reshape(-1)
    return nc.masked_softmax(scores, m, axis=0)


def query_guided_fusion(omega, refined: list, features, mask, ps: ParamSet, cfg: QaffConfig):
    """Stage-weighted query -> per-agent cross-attention -> agent-weighted sum."""
    m = _valid(mask)
    qbar = refined[0] * omega[0:1].reshape(1, 1, 1, 1)
    for s in range(1, len(refined)):
        qbar = qbar + refined[s] * omega[s:s + 1].reshape(1, 1, 1, 1)
    cross = neighborhood_cross_attention(qbar, features, m, ps, cfg.heads, cfg.neighborhood)
    alpha = agent_weights(cross, m, ps)
    n = cross.shape[0]
    fused = (cross * alpha.reshape(n, 1, 1, 1)).sum(axis=0)
    return fused, alpha, cross


def qaff_forward(stage_queries: list, features, mask, ps: ParamSet, cfg: QaffConfig) -> FusedFeatures:
    m = _valid(mask)
    refined = [cross_agent_mhsa(q, m, ps, s, cfg.heads) for s, q in enumerate(stage_queries)]
    omega = stage_weights(refined, m, ps)
    fused, alpha, cross = query_guided_fusion(omega, refined, features, m, ps, cfg)
    return FusedFeatures(fused, omega, alpha, refined, cross)


def mean_fusion(features, mask) -> nc.Tensor:
    """Plain average of valid agents' maps, used when fusion attention is ablated."""
    m = _valid(mask)
    f = nc.as_tensor(features) * m[:, None, None, None].astype(np.float64)
    return f.sum(axis=0) * (1.0 / m.sum())
