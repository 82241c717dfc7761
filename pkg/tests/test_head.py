import math

import numpy as np
import pytest

from collabdet import numcore as nc
from collabdet.config import HeadConfig, VoxelConfig
from collabdet.encoder import cell_centers
from collabdet.head import (
    Detection, HeadOutput, attention, decode, decode_boxes, head_forward, init_head, nms, select_queries,
)
from collabdet.params import ParamSet

VCFG = VoxelConfig(range_xy=(-6.4, 6.4), channels=4)
HCFG = HeadConfig(heads=2, model_dim=8, top_k=5)


@pytest.fixture(scope="module")
def params():
    ps = ParamSet()
    init_head(ps, np.random.default_rng(0), 8, 6, HCFG)
    return ps


def test_select_queries_ranking():
    prob = np.full((3, 4, 4), 0.1)
    prob[0, 0, 0] = 0.8
    prob[1, 0, 1] = 0.9  # neighbour of (0, 0): (0, 0) is no longer a peak
    prob[2, 3, 3] = 0.5
    prob[0, 2, 0] = 0.3
    cells = select_queries(prob, 5)
    # peaks by score, then the best non-peaks; the flat 0.1 region ties row-major
    assert cells[:3].tolist() == [[0, 1], [3, 3], [2, 0]]
    assert cells[3].tolist() == [0, 0]
    assert cells[4].tolist() == [0, 2]
    with pytest.raises(ValueError):
        select_queries(prob, 17)
    with pytest.raises(ValueError):
        select_queries(prob, 0)


def test_attention_matches_explicit_formula(params):
    rng = np.random.default_rng(1)
    xq, xkv = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    got = attention(params, "head.cross", xq, xkv, 2).data
    wq, wk, wv, wo = (params[f"head.cross.{n}.weight"].data for n in ("q", "k", "v", "out"))
    q, k, v = xq @ wq, xkv @ wk, xkv @ wv
    heads = []
    for hd in range(2):
        sl = slice(4 * hd, 4 * hd + 4)
        s = q[:, sl] @ k[:, sl].T / 2.0
        a = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((a / a.sum(axis=1, keepdims=True)) @ v[:, sl])
    assert np.allclose(got, np.hstack(heads) @ wo, atol=1e-13)


def test_head_forward_shapes_and_determinism(params):
    rng = np.random.default_rng(2)
    h, w = VCFG.bev_shape
    f_in = rng.normal(size=(8, h, w))
    qmap = rng.normal(size=(6, h, w))
    a = head_forward(f_in, qmap, params, HCFG)
    b = head_forward(f_in, qmap, params, HCFG)
    assert a.heatmap.shape == (3, h, w)
    assert a.cells.shape == (HCFG.top_k, 2)
    assert a.regression.shape == (HCFG.top_k, 8)
    assert a.class_logits.shape == (HCFG.top_k, 3)
    assert np.array_equal(a.regression.data, b.regression.data)
    # the queries are the top cells of the dense heatmap
    expected = select_queries(nc._sigmoid(a.heatmap.data), HCFG.top_k)
    assert np.array_equal(a.cells, expected)


def test_decode_by_hand():
    xs, ys = cell_centers(VCFG)
    cs = VCFG.cell_size
    reg = np.array([[0.25, -0.5, 0.9, math.log(4.0), math.log(2.0), math.log(1.5), 1.0, 0.0]])
    logits = np.array([[-3.0, 2.0, -1.0]])
    out = HeadOutput(nc.Tensor(np.zeros((3, 8, 8))), np.array([[3, 4]]), nc.Tensor(reg), nc.Tensor(logits))
    (d,) = decode_boxes(out, VCFG)
    assert d.center == pytest.approx((xs[4] + 0.25 * cs, ys[3] - 0.5 * cs, 0.9))
    assert d.size == pytest.approx((4.0, 2.0, 1.5))
    assert d.yaw == pytest.approx(math.pi / 2)
    assert d.class_id == 1
    assert d.score == pytest.approx(1 / (1 + math.exp(-2.0)))
    # below the score threshold nothing survives
    low = HeadOutput(out.heatmap, out.cells, out.regression, nc.Tensor(np.full((1, 3), -10.0)))
    assert decode(low, VCFG, HCFG) == []


def _det(x, score, cls=0):
    return Detection((x, 0.0, 0.5), (4.0, 2.0, 1.5), 0.0, cls, score)


def test_nms():
    dets = [_det(0.0, 0.6), _det(0.3, 0.9), _det(10.0, 0.5), _det(0.1, 0.7, cls=1)]
    kept = nms(dets, 0.2)
    assert [(d.center[0], d.class_id) for d in kept] == [(0.3, 0), (0.1, 1), (10.0, 0)]
    # equal scores: input order wins
    tie = nms([_det(0.0, 0.5), _det(0.2, 0.5)], 0.2)
    assert [d.center[0] for d in tie] == [0.0]


def test_detection_dict():
    d = _det(1.0, 0.4, cls=2).to_dict()
    assert d == {"class": 2, "score": 0.4, "center": [1.0, 0.0, 0.5], "size": [4.0, 2.0, 1.5], "yaw": 0.0}
