"""Central finite-difference verification of the analytic gradients.

Perturbing a head weight cannot change the encoder output, so the full-model
check caches every pipeline phase upstream of the parameter being perturbed
and only recomputes what depends on it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .loss import total_loss
from .model import encode_agents, fuse, gather_agents, mine, prepare_scene, run_head
from .params import ParamSet

PHASES = ("enc", "comp", "him", "qaff", "head")


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    seconds: float
    per_param: dict = field(default_factory=dict)  # name -> max rel error
    n_extended: int = 0  # elements re-evaluated in long double

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and np.isfinite(self.max_rel_error)

    def ok(self, tol: float) -> bool:
        return self.passed and self.max_rel_error <= tol


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / (np.abs(a) + np.abs(n) + floor)


def check_function(loss_fn, params: list, eps: float = 1e-5) -> GradCheckReport:
    """Compare ``backward`` against central differences for a scalar ``loss_fn()``."""
    t0 = time.perf_counter()
    for p in params:
        p.zero_grad()
    with nc.Tape():
        loss = loss_fn()
    nc.backward(loss)
    per, worst, worst_err, count = {}, "", 0.0, 0
    for p in params:
        analytic = p.grad.copy()
        numeric = np.zeros_like(analytic)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(loss_fn().data)
            flat[i] = old - eps
            down = float(loss_fn().data)
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        err = float(relative_error(analytic, numeric).max()) if analytic.size else 0.0
        per[p.name] = err
        count += analytic.size
        if err >= worst_err:
            worst, worst_err = p.name, err
    return GradCheckReport(worst_err, worst, count, time.perf_counter() - t0, per)


def _phase_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return "comp" if head.startswith("comp") else head


class StagedLoss:
    """Total training loss of one scene with upstream phases cached.

    ``refresh()`` recomputes and caches everything; ``loss(phase)`` recomputes
    from ``phase`` onward and reuses the cache for the rest.
    """

    def __init__(self, scene, ps: ParamSet, cfg: RunConfig):
        self.ps, self.cfg = ps, cfg
        self.agents, self.valid, self.gt = gather_agents(prepare_scene(scene), cfg)
        self.cache: dict = {}
        self.refresh()

    def refresh(self) -> None:
        self.cache.clear()
        self.loss("enc", store=True)

    def loss(self, phase: str = "enc", store: bool = False) -> nc.Tensor:
        ps, cfg, c = self.ps, self.cfg, self.cache
        start = PHASES.index("enc" if phase == "comp" else phase)
        if start <= 0 or "feats" not in c:
            feats = encode_agents(self.agents, ps, cfg)
        else:
            feats = c["feats"]
        if start <= 2 or "stages" not in c:
            queries, stages = mine(feats, self.gt, ps, cfg, "train")
        else:
            queries, stages = c["queries"], c["stages"]
        if start <= 3 or "fused" not in c:
            fused, _, _ = fuse(feats, queries, self.valid, ps, cfg)
        else:
            fused = c["fused"]
        head = run_head(fused, feats, queries, ps, cfg)
        if store:
            c.update(feats=feats, queries=queries, stages=stages, fused=fused)
        if start <= 2 or "him_terms" not in c:
            lb = total_loss(head, stages, self.gt, cfg.voxel, cfg.loss)
            if store:
                c["him_terms"] = lb.him
            return lb.total
        # him terms are constant when only fusion/head weights move
        lb = total_loss(head, [], self.gt, cfg.voxel, cfg.loss)
        total = lb.total
        for lh in c["him_terms"]:
            total = total + lh.data * cfg.loss.lambdas[3]
        return total


def _numeric(staged: StagedLoss, p, phase: str, indices, eps: float) -> np.ndarray:
    flat = p.data.reshape(-1)
    out = np.zeros(len(indices), dtype=np.longdouble)
    for j, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + eps
        up = staged.loss(phase).data
        flat[i] = old - eps
        down = staged.loss(phase).data
        flat[i] = old
        out[j] = (up - down) / (2 * eps)
    return out


def check_model(scene, ps: ParamSet, cfg: RunConfig, eps: float = 1e-5, recheck: float = 1e-5,
                names: list[str] | None = None) -> GradCheckReport:
    """Finite-difference check of every (or each named) parameter on one scene.

    Differences are first taken in float64. Elements disagreeing by more than
    ``recheck`` (typically gradients so small that float64 rounding of the loss
    dominates the difference) are re-evaluated with the whole forward pass in
    long double, which only sharpens the oracle.
    """
    t0 = time.perf_counter()
    names = sorted(ps) if names is None else list(names)
    staged = StagedLoss(scene, ps, cfg)
    ps.zero_grad()
    with nc.Tape():
        loss = staged.loss("enc")
    nc.backward(loss)
    base = float(loss.data)
    analytic = {n: ps[n].grad.reshape(-1).copy() for n in names}
    numeric = {n: _numeric(staged, ps[n], _phase_of(n), range(ps[n].data.size), eps).astype(np.float64)
               for n in names}
    retry = {n: np.flatnonzero(relative_error(analytic[n], numeric[n]) > recheck) for n in names}
    if any(len(v) for v in retry.values()):
        saved = {k: p.data for k, p in ps.items()}
        try:
            for p in ps.values():
                p.data = p.data.astype(np.longdouble)
            with nc.extended_precision():
                precise = StagedLoss(scene, ps, cfg)
                for n, idx in retry.items():
                    if len(idx):
                        numeric[n][idx] = _numeric(precise, ps[n], _phase_of(n), idx, eps).astype(np.float64)
        finally:
            for k, p in ps.items():
                p.data = saved[k]
    per, worst, worst_err, count = {}, "", 0.0, 0
    for n in names:
        err = float(relative_error(analytic[n], numeric[n]).max()) if analytic[n].size else 0.0
        per[n] = err
        count += analytic[n].size
        if err >= worst_err:
            worst, worst_err = n, err
    if float(staged.loss("enc").data) != base:
        raise RuntimeError("parameters were not restored after the check")
    return GradCheckReport(worst_err, worst, count, time.perf_counter() - t0, per,
                           int(sum(len(v) for v in retry.values())))
