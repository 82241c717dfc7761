import io
import json

import numpy as np
import pytest

from collabdet.config import TrainConfig, micro_config
from collabdet.model import init_params
from collabdet.params import ParamSet
from collabdet.scenesim import generate_scene
from collabdet.train import TrainingDiverged, batch_schedule, sgd_step, train


@pytest.fixture(scope="module")
def scenes():
    cfg = micro_config()
    return [generate_scene(i, cfg.scene) for i in range(3)]


def test_full_batch_when_batch_covers_set():
    sched = batch_schedule(5, 8, 3, seed=0)
    assert all(s.tolist() == [0, 1, 2, 3, 4] for s in sched)


def test_epochs_are_permutations():
    sched = batch_schedule(6, 2, 9, seed=4)
    flat = np.concatenate(sched)
    for e in range(3):
        assert sorted(flat[6 * e: 6 * e + 6].tolist()) == list(range(6))
    assert [s.tolist() for s in sched] == [s.tolist() for s in batch_schedule(6, 2, 9, seed=4)]
    with pytest.raises(ValueError):
        batch_schedule(0, 2, 1, seed=0)


def test_sgd_step_and_clipping():
    ps = ParamSet()
    p = ps.add("w", np.array([1.0, 2.0]))
    p.grad[:] = [3.0, 4.0]
    assert sgd_step(ps, 0.1) == pytest.approx(5.0)
    assert p.data == pytest.approx([0.7, 1.6])
    p.grad[:] = [3.0, 4.0]
    sgd_step(ps, 1.0, grad_clip=1.0)
    assert p.data == pytest.approx([0.7 - 0.6, 1.6 - 0.8])


def test_zero_steps_leave_parameters(scenes):
    cfg = micro_config()
    ps = init_params(cfg)
    before = ps.state()
    assert train(ps, scenes, cfg, 0) == []
    assert all(np.array_equal(before[k], v) for k, v in ps.state().items())


def test_log_lines_and_determinism(scenes):
    cfg = micro_config().replace(train=TrainConfig(lr=1e-2, batch_size=2))
    logs = []
    for _ in range(2):
        buf = io.StringIO()
        train(init_params(cfg), scenes, cfg, 2, log=buf)
        logs.append(buf.getvalue())
    assert logs[0] == logs[1]
    rows = [json.loads(line) for line in logs[0].splitlines()]
    assert [r["step"] for r in rows] == [0, 1]
    assert set(rows[0]) == {"step", "L_cls", "L_bbox", "L_hm", "L_him", "total", "grad_norm"}
    assert len(rows[0]["L_him"]) == cfg.him.n_stages


def test_frozen_parameters_do_not_move(scenes):
    cfg = micro_config()
    ps = init_params(cfg)
    before = ps.state()
    train(ps, scenes[:1], cfg, 1, trainable={"head.cls.bias"})
    changed = [k for k, v in ps.state().items() if not np.array_equal(v, before[k])]
    assert changed == ["head.cls.bias"]


def test_nan_aborts_before_update(scenes):
    cfg = micro_config()
    ps = init_params(cfg)
    ps["head.hm_out.bias"].data[:] = np.nan
    snapshot = ps.state()
    with pytest.raises(TrainingDiverged) as err:
        train(ps, scenes, cfg, 3)
    assert err.value.step == 0
    for k, v in ps.state().items():
        assert np.array_equal(v, snapshot[k], equal_nan=True)
