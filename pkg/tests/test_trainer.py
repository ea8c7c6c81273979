import dataclasses

import numpy as np
import pytest

from tract import nnkit as nk
from tract import synthgen as sg
from tract.errors import ConfigurationError, ContractError, TrainingError
from tract.model import ModelConfig, featurize
from tract.pcl import ContrastiveConfig
from tract.trainer import (
    DynamicsLog,
    EwtaSchedule,
    ewta_is_smooth,
    ewta_loss,
    train_baseline,
    train_phase1,
    train_phase2,
    write_train_log,
)

CFG = ModelConfig(embed_dim=16, num_hypotheses=6, hist_width=16, nb_width=8, map_width=8, dec_width=24)
SCHED = EwtaSchedule(stages=(6, 3, 1), epochs_per_stage=2, batch_size=32)


@pytest.fixture(scope="module")
def feats():
    scen = [sg.ego_normalize(s) for s in sg.generate_dataset(sg.MixtureConfig(seed=8), 96)]
    return featurize(scen, CFG)


def _labels(n):
    return [("easy", "hard", "confusing", "trained")[i % 4] if i % 5 else "easy" for i in range(n)]


def _pred(hyps):
    hyps = np.asarray(hyps, dtype=float)
    return nk.Value(hyps.reshape(1, -1))


def test_ewta_examples():
    fut = np.zeros((1, 1, 2))
    hyps = [[[1.0, 0.0]], [[0.0, 2.0]], [[-3.0, 0.0]]]
    assert ewta_loss(_pred(hyps), fut, 2, 3).data == pytest.approx(1.5, abs=1e-15)
    assert ewta_loss(_pred(hyps), fut, 3, 3).data == pytest.approx(2.0, abs=1e-15)
    exact = [[[0.0, 0.0]], [[5.0, 0.0]]]
    assert ewta_loss(_pred(exact), fut, 1, 2).data == 0.0
    with pytest.raises(ContractError):
        ewta_loss(_pred(hyps), fut, 4, 3)


def test_ewta_gradient_only_reaches_winners_and_ties_go_low():
    fut = np.zeros((1, 2, 2))
    hyps = np.array([[[3.0, 0.0], [3.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]]])
    p = _pred(hyps)
    nk.backward(ewta_loss(p, fut, 1, 3))
    g = p.grad.reshape(3, 2, 2)
    assert not g[0].any() and g[1].any() and not g[2].any()
    assert not ewta_is_smooth(hyps.reshape(1, -1), fut, 1, 3)


def test_ewta_gradient_check_at_tie_is_flagged():
    fut = np.zeros((1, 2, 2))
    hyps = np.array([[[1.0, 0.5], [1.0, 0.5]], [[1.0, 0.5], [1.0, 0.5]], [[2.0, 1.0], [3.0, 1.0]]])
    rep = nk.grad_check(lambda q: ewta_loss(q["p"], fut, 1, 3), {"p": hyps.reshape(1, -1)}, smooth_at=lambda q: ewta_is_smooth(q["p"], fut, 1, 3))
    assert rep.nonsmooth and rep.passed


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        EwtaSchedule(stages=(5, 5, 1)).validate(20)
    with pytest.raises(ConfigurationError):
        EwtaSchedule(stages=(5, 2)).validate(20)
    with pytest.raises(ConfigurationError):
        EwtaSchedule(stages=(30, 1)).validate(20)
    s = EwtaSchedule()
    assert s.total_epochs == 25 and [s.k_at(e) for e in (1, 5, 6, 25)] == [20, 20, 10, 1]


def test_phase1_records_and_log(feats, tmp_path):
    res = train_phase1(feats, CFG, SCHED, seed=1, record_stride=2)
    assert res.dynamics.values.shape == (96, SCHED.total_epochs // 2)
    assert res.dynamics.epochs == [2, 4, 6]
    assert res.embeddings.shape == (96, 16)
    assert [r["stage_k"] for r in res.train_log] == [SCHED.k_at(e) for e in range(1, 7)]
    path = tmp_path / "dyn.jsonl"
    res.dynamics.write_jsonl(path, {"seed": 1})
    back = DynamicsLog.read_jsonl(path, 2)
    assert back.values.tobytes() == res.dynamics.values.tobytes()
    write_train_log(tmp_path / "log.csv", res.train_log, {"seed": 1})
    assert (tmp_path / "log.csv").read_text().startswith("epoch,stage_k,L_reg,L_ins,L_proto,total,seed")


def test_phase1_is_deterministic(feats):
    a = train_phase1(feats, CFG, SCHED, seed=3)
    b = train_phase1(feats, CFG, SCHED, seed=3)
    assert a.dynamics.values.tobytes() == b.dynamics.values.tobytes()
    assert a.train_log == b.train_log


def test_single_sample_overfits(feats):
    one = feats.subset([0])
    res = train_phase1(one, CFG, EwtaSchedule(stages=(6, 3, 1), epochs_per_stage=15, batch_size=1), seed=0)
    series = res.dynamics.values[0]
    assert series[-1] < series[0]


def test_lambda_zero_reproduces_phase1_bitwise(feats):
    base = train_baseline(feats, CFG, SCHED, seed=5)
    zero = train_phase2(feats, CFG, SCHED, _labels(len(feats)), ContrastiveConfig(lam=0.0), seed=5)
    for k in base.params:
        assert base.params[k].tobytes() == zero.params[k].tobytes()


def test_phase2_converges_with_default_weights(feats):
    res = train_phase2(feats, CFG, SCHED, _labels(len(feats)), ContrastiveConfig(lam=0.01, tau=0.1), seed=2)
    assert res.train_log[-1]["L_reg"] < res.train_log[0]["L_reg"]
    assert all(r["L_ins"] > 0 and r["L_proto"] > 0 for r in res.train_log)


def test_phase2_frozen_prototypes(feats):
    p1 = train_phase1(feats, CFG, SCHED, seed=1)
    res = train_phase2(feats, CFG, SCHED, _labels(len(feats)), ContrastiveConfig(), seed=2, prototype_source="phase1_frozen", phase1_embeddings=p1.embeddings)
    assert np.isfinite(res.train_log[-1]["total"])
    with pytest.raises(ContractError):
        train_phase2(feats, CFG, SCHED, _labels(len(feats)), ContrastiveConfig(), seed=2, prototype_source="phase1_frozen")


def test_phase2_contracts(feats):
    with pytest.raises(ContractError):
        train_phase2(feats, CFG, SCHED, _labels(5), ContrastiveConfig(), seed=0)
    with pytest.raises(ContractError):
        train_phase2(feats, CFG, SCHED, _labels(len(feats)), ContrastiveConfig(tau=0.0), seed=0)


def test_non_finite_loss_reports_epoch_and_batch(feats):
    bad = dataclasses.replace(feats, future=feats.future.copy())
    bad.future[40, 2, 0] = np.inf
    with pytest.raises(TrainingError, match=r"epoch 1, batch \d"):
        train_baseline(bad, CFG, SCHED, seed=0)
    with pytest.raises(ContractError):
        train_baseline(feats.subset(np.array([], dtype=int)), CFG, SCHED, seed=0)
