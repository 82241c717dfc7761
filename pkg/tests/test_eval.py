import csv
import json

import numpy as np
import pytest

from ap_cases import CASES, det, gt
from collabdet.config import micro_config
from collabdet.eval import (
    ABLATIONS, ablated, ap_from_matches, average_precision, evaluate, fit_compression_adapters, match_scene,
    mean_ap, sweep_compression, threshold_key,
)
from collabdet.model import init_params
from collabdet.scenesim import CAR, generate_scene


@pytest.mark.parametrize("case", CASES, ids=[c[0] for c in CASES])
def test_ap_hand_cases(case):
    _, dets, gts, thr, cls, rng, expected = case
    got = average_precision(dets, gts, thr, cls, rng)
    if expected is None:
        assert got is None
    else:
        assert got == pytest.approx(expected, abs=1e-15)


def test_single_scene_form():
    assert average_precision([det(0, 0.9)], [gt(0)], 0.5, CAR) == 1.0


def test_match_scene_order_and_ties():
    scores, tp, n = match_scene([det(0, 0.5), det(0.5, 0.5)], [gt(0)], 0.5, CAR)
    assert n == 1
    assert scores.tolist() == [0.5, 0.5]
    assert tp.tolist() == [True, False]  # equal scores keep input order


def test_greedy_takes_best_unclaimed_gt():
    scores, tp, _ = match_scene([det(0.5, 0.9), det(1.6, 0.8)], [gt(0), gt(2)], 0.3, CAR)
    assert tp.tolist() == [True, True]


def test_ap_from_matches_edge_cases():
    assert ap_from_matches(np.zeros(0), np.zeros(0, dtype=bool), 0) is None
    assert ap_from_matches(np.zeros(0), np.zeros(0, dtype=bool), 3) == 0.0


def test_mean_ap_skips_undefined():
    assert mean_ap({"car": 0.5, "pedestrian": None, "truck": 0.25}) == 0.375
    assert mean_ap({"car": None}) is None


def test_threshold_key():
    assert threshold_key(0.3) == "ap03" and threshold_key(0.5) == "ap05"


def test_ablated_switches():
    cfg = micro_config()
    flags = {a: (ablated(cfg, a).him_enabled, ablated(cfg, a).qaff_enabled) for a in ABLATIONS}
    assert flags == {"none": (True, True), "him": (False, True), "qaff": (True, False), "both": (False, False)}
    with pytest.raises(ValueError):
        ablated(cfg, "all")


@pytest.fixture(scope="module")
def micro():
    cfg = micro_config()
    scenes = [generate_scene(i, cfg.scene) for i in range(3)]
    return cfg, init_params(cfg), scenes


def test_report_structure(micro):
    cfg, ps, scenes = micro
    rep = evaluate(ps, scenes, cfg)
    d = json.loads(rep.to_json())
    assert set(d["per_class"]) == {"car", "pedestrian", "truck"}
    for key in ("map03", "map05"):
        vals = [v[key.replace("m", "", 1)] for v in d["per_class"].values() if v[key.replace("m", "", 1)] is not None]
        assert d[key] == pytest.approx(np.mean(vals))
    assert [s["seed"] for s in d["per_scene"]] == [0, 1, 2]
    assert len(d["per_scene"][0]["alpha"]) == cfg.max_agents
    assert sum(d["per_scene"][0]["omega"]) == pytest.approx(1.0)


def test_ablation_report_has_no_weights(micro):
    cfg, ps, scenes = micro
    rep = evaluate(ps, scenes[:1], ablated(cfg, "both"))
    assert rep.per_scene[0]["omega"] is None and rep.per_scene[0]["alpha"] is None


def test_parallel_evaluation_is_identical(micro):
    cfg, ps, scenes = micro
    assert evaluate(ps, scenes, cfg, jobs=2).to_json() == evaluate(ps, scenes, cfg).to_json()


def test_sweep_writes_all_ratios(micro, tmp_path):
    cfg, ps, scenes = micro
    ps = init_params(cfg)
    fitted = fit_compression_adapters(ps, scenes, cfg, [1, 2, 4, 8])
    assert fitted == [2, 4, 8]
    rows = sweep_compression(ps, scenes[:1], cfg, [8, 1, 2, 4, 2], tmp_path / "s.csv", tmp_path / "s.json")
    assert [r[0] for r in rows] == [1, 2, 4, 8]
    with open(tmp_path / "s.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["ratio", "map03", "map05"]
    assert [int(r[0]) for r in table[1:]] == [1, 2, 4, 8]
    plot = json.loads((tmp_path / "s.json").read_text())
    assert plot["ratio"] == [1, 2, 4, 8]
    with pytest.raises(ValueError):
        sweep_compression(ps, scenes[:1], cfg, [3])
