"""End-to-end collaborative detector: encode -> mine -> fuse -> detect."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .compression import apply_compression, init_compression
from .config import RunConfig
from .encoder import encode_batch, init_encoder, voxelize
from .head import Detection, HeadOutput, decode, head_forward, init_head
from .him import QuerySet, StageOutput, init_him, run_him
from .loss import LossBreakdown, total_loss
from .params import ParamSet
from .qaff import init_qaff, mean_fusion, qaff_forward
from .scenesim import Scene, to_ego_frame


@dataclass
class ForwardOutput:
    valid: np.ndarray  # (N,) bool over agent slots
    agent_ids: list[int]  # id of each valid agent, slot order
    features: nc.Tensor  # (N, C, H, W)
    queries: QuerySet | None
    stages: list[StageOutput]
    fused: nc.Tensor
    head: HeadOutput
    stage_weights: np.ndarray | None = None
    agent_weights: np.ndarray | None = None
    boxes: list = field(default_factory=list)


def init_params(cfg: RunConfig, seed: int | None = None) -> ParamSet:
    """Deterministic seeded initialisation of every learnable tensor."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    ps = ParamSet()
    c = cfg.voxel.channels
    init_encoder(ps, rng, cfg.voxel)
    init_him(ps, rng, c, cfg.him)
    init_qaff(ps, rng, c, cfg.him.n_stages, cfg.qaff)
    init_head(ps, rng, 2 * c, cfg.him.n_stages * c, cfg.head)
    if cfg.compression_ratio > 1:
        init_compression(ps, rng, c, cfg.compression_ratio)
    return ps


def boxes_in_range(boxes, cfg: RunConfig) -> list:
    lo, hi = cfg.eval.range_xy
    return [b for b in boxes if lo <= b.center[0] < hi and lo <= b.center[1] < hi]


def prepare_scene(scene: Scene) -> Scene:
    """Move a scene into its ego frame (no-op when already there)."""
    if scene.ego.pose == (0.0, 0.0, 0.0):
        return scene
    return to_ego_frame(scene)


def gather_agents(scene: Scene, cfg: RunConfig):
    """Ego-first agent list truncated to the slot count, the slot mask and in-range gt."""
    scene = prepare_scene(scene)
    n = cfg.max_agents
    agents = sorted(scene.agents, key=lambda a: (a.role != "ego", a.agent_id))[:n]
    if not cfg.collaboration:
        agents = agents[:1]
    valid = np.zeros(n, dtype=bool)
    valid[: len(agents)] = True
    return agents, valid, boxes_in_range(scene.boxes, cfg)


def encode_agents(agents, ps: ParamSet, cfg: RunConfig) -> nc.Tensor:
    vox = [voxelize(a.points, cfg.voxel) for a in agents]
    feats = encode_batch(vox, ps, cfg.voxel)  # (n_valid, C, H, W)
    if cfg.compression_ratio > 1 and len(agents) > 1:
        # only maps that would be transmitted go through the bottleneck
        sent = apply_compression(feats[1:], ps, cfg.compression_ratio)
        feats = nc.concat([feats[0:1], sent], axis=0)
    return feats


def mine(feats, gt, ps: ParamSet, cfg: RunConfig, mode: str):
    if not cfg.him_enabled:
        return None, []
    return run_him(feats, ps, cfg.him, cfg.voxel, gt=gt if mode == "train" else None,
                   mode=mode, center_weight=cfg.loss.match_center_weight)


def fuse(feats, queries, valid: np.ndarray, ps: ParamSet, cfg: RunConfig):
    """Fused ego-frame map plus stage and agent weights (None when fusion is ablated)."""
    nv = feats.shape[0]
    pad = len(valid) - nv

    def slots(t: nc.Tensor) -> nc.Tensor:
        if pad == 0:
            return t
        return nc.concat([t, nc.Tensor(np.zeros((pad,) + t.shape[1:]))], axis=0)

    if not cfg.qaff_enabled:
        return mean_fusion(feats, np.ones(nv, dtype=bool)), None, None
    stage_q = [slots(q) for q in queries.per_stage] if queries is not None else [slots(feats)]
    fusion = qaff_forward(stage_q, slots(feats), valid, ps, cfg.qaff)
    return fusion.fused, fusion.stage_weights.data.copy(), fusion.agent_weights.data.copy()


def run_head(fused, feats, queries, ps: ParamSet, cfg: RunConfig) -> HeadOutput:
    _, c, h, w = feats.shape
    head_in = nc.concat([fused, feats[0]], axis=0)
    if queries is not None:
        qmap = queries.combined.mean(axis=0)
    else:
        qmap = nc.Tensor(np.zeros((cfg.him.n_stages * c, h, w)))
    return head_forward(head_in, qmap, ps, cfg.head)


def forward(scene: Scene, ps: ParamSet, cfg: RunConfig, mode: str = "infer") -> ForwardOutput:
    """Run the pipeline on one scene expressed in (or convertible to) its ego frame."""
    agents, valid, gt = gather_agents(scene, cfg)
    feats = encode_agents(agents, ps, cfg)
    queries, stages = mine(feats, gt, ps, cfg, mode)
    fused, omega, alpha = fuse(feats, queries, valid, ps, cfg)
    head = run_head(fused, feats, queries, ps, cfg)
    return ForwardOutput(valid, [a.agent_id for a in agents], feats, queries, stages, fused, head,
                         omega, alpha, gt)


def compute_loss(out: ForwardOutput, cfg: RunConfig) -> LossBreakdown:
    return total_loss(out.head, out.stages, out.boxes, cfg.voxel, cfg.loss)


def detect(scene: Scene, ps: ParamSet, cfg: RunConfig) -> tuple[list[Detection], ForwardOutput]:
    out = forward(scene, ps, cfg, mode="infer")
    return decode(out.head, cfg.voxel, cfg.head), out


def load_params(state: dict, cfg: RunConfig) -> ParamSet:
    """Model parameters from a checkpoint state.

    Compression adapters in the state are kept whatever their ratio, so one
    checkpoint can serve a whole sweep; the adapter for ``cfg.compression_ratio``
    must be among them. Any other mismatch is rejected with the offending names.
    """
    ps = init_params(cfg.replace(compression_ratio=1))
    adapters = {k: v for k, v in state.items() if k.startswith("comp")}
    ps.load_state({k: v for k, v in state.items() if k not in adapters})
    for k in sorted(adapters):
        ps.add(k, adapters[k])
    r = cfg.compression_ratio
    if r > 1 and f"comp{r}.down" not in ps:
        raise ValueError(f"checkpoint has no compression adapter for ratio {r}")
    return ps
