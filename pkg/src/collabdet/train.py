"""Plain SGD training on the joint loss with per-step JSON loss records."""
from __future__ import annotations

import json
import math
from typing import Callable, TextIO

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .model import compute_loss, forward, prepare_scene
from .params import ParamSet


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, record: dict):
        super().__init__(f"non-finite loss at step {step}: {record}")
        self.step = step
        self.record = record


def batch_schedule(n_scenes: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Scene indices of every step: reshuffled epochs from a seeded generator.

    With ``batch_size >= n_scenes`` every step sees the whole set (full-batch descent).
    """
    if n_scenes == 0:
        raise ValueError("no training scenes")
    b = min(batch_size, n_scenes)
    if b == n_scenes:
        return [np.arange(n_scenes) for _ in range(steps)]
    rng = np.random.default_rng(seed)
    out, pool = [], np.zeros(0, dtype=np.int64)
    for _ in range(steps):
        if len(pool) < b:
            pool = np.concatenate([pool, rng.permutation(n_scenes)])
        out.append(pool[:b])
        pool = pool[b:]
    return out


def _mean_record(values: list[dict]) -> dict:
    n = len(values)
    rec = {k: sum(v[k] for v in values) / n for k in ("L_cls", "L_bbox", "L_hm")}
    n_st = len(values[0]["L_him"])
    rec["L_him"] = [sum(v["L_him"][s] for v in values) / n for s in range(n_st)]
    rec["total"] = sum(v["total"] for v in values) / n
    return rec


def _finite(rec: dict) -> bool:
    vals = [rec["L_cls"], rec["L_bbox"], rec["L_hm"], rec["total"], *rec["L_him"]]
    return all(math.isfinite(v) for v in vals)


def accumulate_gradients(ps: ParamSet, scenes, cfg: RunConfig) -> dict:
    """Zero gradients, then accumulate the batch-mean loss gradient. Returns the mean loss record."""
    ps.zero_grad()
    values = []
    scale = 1.0 / len(scenes)
    for scene in scenes:
        with nc.Tape():
            out = forward(scene, ps, cfg, mode="train")
            lb = compute_loss(out, cfg)
            loss = lb.total * scale
        nc.backward(loss)
        values.append(lb.values())
    return _mean_record(values)


def sgd_step(ps: ParamSet, lr: float, grad_clip: float = 0.0) -> float:
    """In-place ``p -= lr * g``; optional global-norm clipping. Returns the gradient norm."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in ps.values()))
    scale = 1.0
    if grad_clip > 0.0 and norm > grad_clip:
        scale = grad_clip / norm
    for p in ps.values():
        p.data -= (lr * scale) * p.grad
    return norm


def mean_loss(ps: ParamSet, scenes, cfg: RunConfig) -> dict:
    """Mean loss record over ``scenes`` without recording a tape."""
    return _mean_record([compute_loss(forward(s, ps, cfg, mode="train"), cfg).values() for s in scenes])


def train(ps: ParamSet, scenes, cfg: RunConfig, steps: int, log: TextIO | None = None,
          on_step: Callable[[dict], None] | None = None, trainable: set | None = None) -> list[dict]:
    """Run ``steps`` SGD steps; every step's batch-mean losses go to ``log`` as one JSON line.

    ``trainable`` restricts updates to the named parameters (others are frozen).
    Raises TrainingDiverged on a non-finite loss, before any update at that step.
    """
    scenes = [prepare_scene(s) for s in scenes]
    schedule = batch_schedule(len(scenes), cfg.train.batch_size, steps, cfg.seed)
    records = []
    for step, idx in enumerate(schedule):
        rec = accumulate_gradients(ps, [scenes[i] for i in idx], cfg)
        rec = {"step": step, **rec}
        if not _finite(rec):
            raise TrainingDiverged(step, rec)
        if trainable is not None:
            for name, p in ps.items():
                if name not in trainable:
                    p.grad[...] = 0.0
        rec["grad_norm"] = sgd_step(ps, cfg.train.lr, cfg.train.grad_clip)
        records.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
            log.flush()
        if on_step is not None:
            on_step(rec)
    return records
