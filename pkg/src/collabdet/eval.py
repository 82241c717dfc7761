"""Detection metrics, ablation evaluation and the compression sweep harness."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compression import RATIOS, compress, fit_pca_adapter
from .config import CLASS_NAMES, RunConfig
from .geometry import rotated_bev_iou
from .model import detect, encode_agents, gather_agents, prepare_scene
from .numcore import Parameter
from .params import ParamSet

__all__ = [
    "rotated_bev_iou", "compress", "MetricsReport", "average_precision", "match_scene",
    "ap_from_matches", "mean_ap", "threshold_key", "ablated", "evaluate", "fit_compression_adapters",
    "sweep_compression",
]

ABLATIONS = ("none", "him", "qaff", "both")


def threshold_key(thr: float) -> str:
    """0.3 -> 'ap03', 0.5 -> 'ap05'."""
    return "ap" + f"{thr:g}".replace(".", "")


def _in_range(xy, range_xy) -> bool:
    if range_xy is None:
        return True
    lo, hi = range_xy
    return lo <= xy[0] <= hi and lo <= xy[1] <= hi


def match_scene(dets, gts, iou_thr: float, class_id: int, range_xy=None):
    """Greedy matching within one scene.

    Returns (scores, is_tp, n_gt) for the detections of ``class_id`` that lie in
    range, in descending-score order (ties keep input order).
    """
    gts = [g for g in gts if g.class_id == class_id and _in_range(g.center, range_xy)]
    dets = [d for d in dets if d.class_id == class_id and _in_range(d.center, range_xy)]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    claimed = np.zeros(len(gts), dtype=bool)
    scores, tp = [], []
    for i in order:
        d = dets[i]
        best, best_iou = -1, iou_thr
        for j, g in enumerate(gts):
            if claimed[j]:
                continue
            iou = rotated_bev_iou(d.bev, g.bev)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            claimed[best] = True
        scores.append(d.score)
        tp.append(best >= 0)
    return np.array(scores, dtype=np.float64), np.array(tp, dtype=bool), len(gts)


def ap_from_matches(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float | None:
    """All-point interpolated AP (area under the precision envelope)."""
    if n_gt == 0:
        return None
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(tp, dtype=np.float64)[order]
    if hits.size == 0:
        return 0.0
    tps = np.cumsum(hits)
    precision = tps / np.arange(1, hits.size + 1)
    recall = tps / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def average_precision(dets, gts, iou_thr: float, class_id: int, range_xy=None) -> float | None:
    """AP of one class over one scene, or over several when ``dets`` and ``gts``
    are equally long lists of per-scene lists. None when the class has no gt."""
    if dets and isinstance(dets[0], (list, tuple)) or gts and isinstance(gts[0], (list, tuple)):
        per_scene = list(zip(dets, gts))
    else:
        per_scene = [(dets, gts)]
    scores, tps, n_gt = [], [], 0
    for d, g in per_scene:
        s, t, n = match_scene(d, g, iou_thr, class_id, range_xy)
        scores.append(s)
        tps.append(t)
        n_gt += n
    return ap_from_matches(np.concatenate(scores) if scores else np.zeros(0),
                           np.concatenate(tps) if tps else np.zeros(0, dtype=bool), n_gt)


def mean_ap(per_class: dict) -> float | None:
    """Mean over the classes whose AP is defined."""
    vals = [v for v in per_class.values() if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    config: dict
    per_class: dict  # class name -> {ap03: float|None, ap05: ...}
    maps: dict  # 'map03' -> float|None
    per_scene: list = field(default_factory=list)

    def map_at(self, thr: float) -> float | None:
        return self.maps["m" + threshold_key(thr)]

    def to_dict(self) -> dict:
        out = {"config": self.config, "per_class": self.per_class}
        out.update(self.maps)
        out["per_scene"] = self.per_scene
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def ablated(cfg: RunConfig, ablate: str) -> RunConfig:
    """Config with mining and/or fusion switched off ('none', 'him', 'qaff', 'both')."""
    if ablate not in ABLATIONS:
        raise ValueError(f"ablate must be one of {ABLATIONS}, got {ablate!r}")
    return cfg.replace(
        him_enabled=cfg.him_enabled and ablate not in ("him", "both"),
        qaff_enabled=cfg.qaff_enabled and ablate not in ("qaff", "both"),
    )


def _round(x):
    return None if x is None else float(x)


def _scene_record(job):
    scene, ps, cfg = job
    scene = prepare_scene(scene)
    dets, out = detect(scene, ps, cfg)
    rec = {
        "seed": scene.seed,
        "omega": None if out.stage_weights is None else [float(v) for v in out.stage_weights],
        "alpha": None if out.agent_weights is None else [float(v) for v in out.agent_weights],
        "detections": [d.to_dict() for d in dets],
    }
    return rec, dets, list(scene.boxes)


def evaluate(ps: ParamSet, scenes, cfg: RunConfig, jobs: int = 1) -> MetricsReport:
    """Run detection on every scene and score it; aggregation is in scene order."""
    work = [(s, ps, cfg) for s in scenes]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_scene_record, work))
    else:
        results = [_scene_record(w) for w in work]
    all_dets = [r[1] for r in results]
    all_gts = [r[2] for r in results]
    ecfg = cfg.eval
    per_class: dict = {}
    maps: dict = {}
    for k, name in enumerate(CLASS_NAMES):
        if name not in ecfg.classes:
            continue
        per_class[name] = {
            threshold_key(t): _round(average_precision(all_dets, all_gts, t, k, ecfg.range_xy))
            for t in ecfg.iou_thresholds
        }
    for t in ecfg.iou_thresholds:
        key = threshold_key(t)
        maps["m" + key] = mean_ap({c: v[key] for c, v in per_class.items()})
    return MetricsReport(cfg.to_dict(), per_class, maps, [r[0] for r in results])


def _non_ego_features(ps: ParamSet, scenes, cfg: RunConfig) -> np.ndarray:
    rows = []
    base = cfg.replace(compression_ratio=1)
    for scene in scenes:
        agents, _, _ = gather_agents(scene, base)
        if len(agents) < 2:
            continue
        f = encode_agents(agents[1:], ps, base).data  # (n, C, H, W)
        occupied = np.abs(f).sum(axis=1) > 0
        rows.append(np.moveaxis(f, 1, -1)[occupied])
    c = cfg.voxel.channels
    return np.concatenate(rows) if rows else np.zeros((0, c))


def fit_compression_adapters(ps: ParamSet, scenes, cfg: RunConfig, ratios, overwrite: bool = False) -> list[int]:
    """PCA-fit (down, up) pairs on the transmitted feature vectors of ``scenes``
    for every ratio that has no adapter yet. Returns the ratios fitted."""
    todo = [r for r in sorted(set(ratios)) if r > 1 and (overwrite or f"comp{r}.down" not in ps)]
    if not todo:
        return []
    samples = _non_ego_features(ps, scenes, cfg)
    for r in todo:
        down, up = fit_pca_adapter(samples, r)
        ps[f"comp{r}.down"] = Parameter(down, f"comp{r}.down")
        ps[f"comp{r}.up"] = Parameter(up, f"comp{r}.up")
    return todo


def sweep_compression(ps: ParamSet, scenes, cfg: RunConfig, ratios=RATIOS, out_csv=None, out_json=None,
                      jobs: int = 1) -> list[tuple[int, float | None, float | None]]:
    """Evaluate the pipeline at each compression ratio on the same scenes.

    Ratios are deduplicated and sorted. Rows are (ratio, mAP@0.3, mAP@0.5).
    """
    ratios = sorted(set(int(r) for r in ratios))
    for r in ratios:
        if r not in RATIOS:
            raise ValueError(f"compression ratio must be one of {RATIOS}, got {r}")
    rows = []
    for r in ratios:
        rep = evaluate(ps, scenes, cfg.replace(compression_ratio=r), jobs=jobs)
        rows.append((r, rep.maps.get("map03"), rep.maps.get("map05")))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ratio", "map03", "map05"])
            for r, a, b in rows:
                w.writerow([r, "" if a is None else repr(a), "" if b is None else repr(b)])
    if out_json is not None:
        plot = {
            "x_label": "compression ratio",
            "y_label": "mAP",
            "ratio": [r for r, _, _ in rows],
            "map03": [a for _, a, _ in rows],
            "map05": [b for _, _, b in rows],
        }
        Path(out_json).write_text(json.dumps(plot, indent=1) + "\n")
    return rows
