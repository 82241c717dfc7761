"""Collaborative multi-agent BEV object detection at desk scale.

Synthetic multi-agent LiDAR scenes, a voxel/BEV encoder, progressive hard
instance mining, query-guided multi-agent fusion, an anchor-free head, and the
losses, metrics and tooling around them, all on a small numpy autodiff core.
"""
from .config import RunConfig, micro_config, resolve_config, toy_config
from .model import detect, forward, init_params, load_params
from .scenesim import Scene, generate_scene

__all__ = [
    "RunConfig", "micro_config", "toy_config", "resolve_config",
    "detect", "forward", "init_params", "load_params",
    "Scene", "generate_scene",
]
__version__ = "0.1.0"
