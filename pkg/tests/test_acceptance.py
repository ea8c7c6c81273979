"""Acceptance criteria 1-11.

Each criterion is one test named ``test_criterion_<n>_<topic>``; the conftest
prints a PASS/FAIL line per criterion at the end of the run. Criteria 8-11 run
the reference config (configs/reference.json) end to end for seeds 0, 1, 2.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from tract import cli
from tract import datamap as dm
from tract import metrics as mt
from tract import nnkit as nk
from tract import synthgen as sg
from tract.config import load_config
from tract.model import ModelConfig, as_values, decode, encode, featurize, init_params
from tract.pcl import ContrastiveBatch, ContrastiveConfig, combined_loss, l_ins, l_proto
from tract.trainer import DynamicsLog, EwtaSchedule, ewta_is_smooth, ewta_loss, train_baseline, train_phase2

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.json"
SEEDS = (0, 1, 2)

GRAD_TOL = 1e-4
GRAD_CONFIGS = 20
LOSS_ORACLE_TOL = 1e-10
PHI_TOL = 1e-12
DISPLACEMENT_TOL = 1e-12
KDE_TOL = 1e-9
TAIL_GAIN = 0.05
ALL_DEGRADATION = 0.05


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_prototypes(rng, d):
    labels = rng.choice(dm.CLUSTERS, size=48)
    return dm.compute_prototypes(labels, _unit(rng, 48, d))


# -- 1 -------------------------------------------------------------------------


def test_criterion_01_gradient_suite(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"ewta": 0.0, "L_ins": 0.0, "L_proto": 0.0, "combined": 0.0}
    cfg = ModelConfig(embed_dim=6, num_hypotheses=4, hist_width=5, nb_width=4, map_width=4, dec_width=6)
    scen = [sg.ego_normalize(s) for s in sg.generate_dataset(sg.MixtureConfig(seed=5), 64)]
    feats = featurize(scen, cfg)
    for i in range(GRAD_CONFIGS):
        b, k_hyp, t = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        k = int(rng.integers(1, k_hyp + 1))
        fut = rng.normal(size=(b, t, 2))
        pred = {"p": rng.normal(size=(b, k_hyp * t * 2))}
        rep = nk.grad_check(lambda q: ewta_loss(q["p"], fut, k, k_hyp), pred, smooth_at=lambda q: ewta_is_smooth(q["p"], fut, k, k_hyp), seed=i)
        worst["ewta"] = max(worst["ewta"], rep.max_rel_err)

        r, d = int(rng.integers(2, 9)), int(rng.integers(2, 6))
        protos = _random_prototypes(rng, d)
        labels = list(rng.choice(protos.clusters, size=r))
        tau = float(rng.uniform(0.1, 1.0))
        raw = {"v": rng.normal(size=(r, d))}

        def batch(q):
            return ContrastiveBatch(nk.normalize(q["v"], axis=1), labels, protos, tau)

        worst["L_ins"] = max(worst["L_ins"], nk.grad_check(lambda q: l_ins(batch(q)), raw).max_rel_err)
        worst["L_proto"] = max(worst["L_proto"], nk.grad_check(lambda q: l_proto(batch(q)), raw).max_rel_err)

        idx = rng.choice(len(feats), size=4, replace=False)
        sub = feats.subset(idx)
        sub_labels = list(rng.choice(protos.clusters, size=4))
        params = init_params(cfg, rng)
        sub_protos = dm.compute_prototypes(rng.choice(dm.CLUSTERS, size=48), _unit(rng, 48, cfg.embed_dim))
        sub_labels = [c if c in sub_protos.clusters else sub_protos.clusters[0] for c in sub_labels]
        kk = int(rng.integers(1, cfg.num_hypotheses + 1))

        def full(q):
            v = encode(q, sub, cfg)
            l_reg = ewta_loss(decode(q, v, cfg), sub.future, kk, cfg.num_hypotheses)
            cb = ContrastiveBatch(nk.normalize(v, axis=1), sub_labels, sub_protos, 0.1)
            return combined_loss(l_reg, cb, 0.01)[0]

        def smooth(q):
            vals = as_values(q, requires_grad=False)
            return ewta_is_smooth(decode(vals, encode(vals, sub, cfg), cfg).data, sub.future, kk, cfg.num_hypotheses)

        worst["combined"] = max(worst["combined"], nk.grad_check(full, params, smooth_at=smooth, components=60, seed=i).max_rel_err)
    elapsed = time.perf_counter() - t0
    for key, val in worst.items():
        record_property(key, f"{val:.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert all(v < GRAD_TOL for v in worst.values()), worst
    assert elapsed < 60.0


# -- 2 -------------------------------------------------------------------------


def test_criterion_02_loss_oracles(record_property):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        r, d = int(rng.integers(2, 17)), int(rng.integers(2, 9))
        protos = _random_prototypes(rng, d)
        assert len(protos.clusters) == 4
        labels = list(rng.choice(dm.CLUSTERS, size=r))
        tau = float(rng.uniform(0.05, 1.0))
        v = _unit(rng, r, d)
        batch = ContrastiveBatch(nk.Value(v), labels, protos, tau)
        ins = oracles.l_ins(v.tolist(), labels, tau)
        proto = oracles.l_proto(v.tolist(), labels, list(protos.clusters), protos.vectors.tolist(), protos.density.tolist())
        worst = max(worst, abs(l_ins(batch).data - ins), abs(l_proto(batch).data - proto))
    record_property("max_abs_err", f"{worst:.1e}")
    assert worst <= LOSS_ORACLE_TOL


# -- 3 -------------------------------------------------------------------------


def test_criterion_03_density_oracle(record_property):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(200):
        n, d = int(rng.integers(1, 30)), int(rng.integers(2, 9))
        emb = rng.normal(size=(n, d)) * rng.uniform(0.1, 5)
        protos = dm.compute_prototypes(["hard"] * n, emb)
        unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        centre = unit.mean(axis=0)
        raw = oracles.density(unit.tolist(), centre.tolist(), 10.0)
        worst = max(worst, abs(protos.density[0] - max(raw, 1e-3)))
    assert worst <= PHI_TOL

    single = dm.compute_prototypes(["easy"], np.array([[3.0, 4.0]]))
    assert dm.cluster_density(np.array([[0.6, 0.8]]), np.array([0.6, 0.8])) == 0.0
    assert single.density[0] == 1e-3
    same = dm.compute_prototypes(["trained"] * 5, np.tile([[1.0, 2.0, 2.0]], (5, 1)))
    assert same.density[0] == 1e-3
    np.testing.assert_allclose(same.vectors[0], [1 / 3, 2 / 3, 2 / 3], atol=1e-15)
    record_property("max_abs_err", f"{worst:.1e}")


# -- 4 -------------------------------------------------------------------------


def test_criterion_04_cluster_partition(record_property):
    rng = np.random.default_rng(404)
    te, tv = 0.70, 0.20
    n = 100_000
    err = rng.uniform(0, 2 * te, n)
    var = rng.uniform(0, 2 * tv, n)
    err[:5000] = te
    var[2500:7500] = tv
    err[7500:7600] = np.nextafter(te, 0)
    var[7600:7700] = np.nextafter(tv, 0)
    labels = dm.classify(err, var, te, tv)
    preds = {
        "hard": (err >= te) & (var < tv),
        "confusing": (err >= te) & (var >= tv),
        "easy": (err < te) & (var < tv),
        "trained": (err < te) & (var >= tv),
    }
    stacked = np.stack(list(preds.values()))
    assert np.all(stacked.sum(axis=0) == 1)
    for name, mask in preds.items():
        assert np.array_equal(labels == name, mask), name
    assert dm.classify(te, tv, te, tv) == "confusing"
    assert dm.classify(te, 0.0, te, tv) == "hard"
    assert dm.classify(0.0, tv, te, tv) == "trained"
    assert dm.classify(np.nextafter(te, 0), np.nextafter(tv, 0), te, tv) == "easy"
    record_property("pairs", n)


# -- 5 -------------------------------------------------------------------------


def test_criterion_05_dataset_map():
    # (series, expected error, expected population variance), computed by hand
    cases = {
        2: [([3, 1], 1.0, 1.0), ([2, 4], 4.0, 1.0)],
        4: [([1, 1, 1, 1], 1.0, 0.0), ([5, 3, 2, 0], 0.0, 3.25), ([0.5, 1.5, 0.5, 1.5], 1.5, 0.25)],
    }
    for length, group in cases.items():
        log = DynamicsLog(np.arange(len(group)))
        for e in range(length):
            log.append(e + 1, np.array([series[e] for series, _, _ in group], dtype=float))
        for point, (series, error, variance) in zip(dm.build_map(log), group):
            assert (point.error, point.variance) == (error, variance), series


# -- 6 -------------------------------------------------------------------------


def test_criterion_06_metric_oracles(record_property):
    rng = np.random.default_rng(606)
    disp_err = kde_err = shift_err = 0.0
    for _ in range(200):
        pred = rng.normal(size=(20, 6, 2)) * rng.uniform(0.1, 4)
        gt = rng.normal(size=(6, 2))
        ade, fde = mt.min_ade_fde(pred, gt)
        ra, rf = oracles.min_ade_fde(pred.tolist(), gt.tolist())
        disp_err = max(disp_err, abs(ade - ra), abs(fde - rf))
        val = mt.kde_nll(pred, gt)
        kde_err = max(kde_err, abs(val - oracles.kde_nll(pred.tolist(), gt.tolist())))
        shift = rng.uniform(-100, 100, size=2)
        shift_err = max(shift_err, abs(mt.kde_nll(pred + shift, gt + shift) - val))
    assert disp_err <= DISPLACEMENT_TOL and kde_err <= KDE_TOL and shift_err <= KDE_TOL

    scen = sg.generate_dataset(sg.MixtureConfig(seed=66), 50)
    mismatches = n_points = 0
    for s in scen:
        pts = s.future.mean(axis=0) + rng.uniform(-25, 25, size=(20, 10, 2))
        hor, off, total = mt.offroad_rates(pts, s.drivable)
        ref_in = [any(oracles.inside_even_odd(x, y, p.tolist()) for p in s.drivable) for x, y in pts.reshape(-1, 2)]
        ref_off = sum(not r for r in ref_in)
        mismatches += int(off != ref_off) + int(hor != (ref_off >= 1)) + int(total != 200)
        n_points += total
    assert n_points >= 10_000 and mismatches == 0
    record_property("disp_err", f"{disp_err:.1e}")
    record_property("kde_err", f"{kde_err:.1e}")
    record_property("polygon_points", n_points)


# -- 7 -------------------------------------------------------------------------


def test_criterion_07_lambda_zero_reduction():
    cfg = ModelConfig()
    scen = [sg.ego_normalize(s) for s in sg.generate_dataset(sg.MixtureConfig(seed=77), 300)]
    feats = featurize(scen, cfg)
    sched = EwtaSchedule(epochs_per_stage=1, batch_size=64)
    labels = [dm.CLUSTERS[i % 4] for i in range(len(feats))]
    base = train_baseline(feats, cfg, sched, seed=9)
    zero = train_phase2(feats, cfg, sched, labels, ContrastiveConfig(lam=0.0), seed=9)
    assert all(base.params[k].tobytes() == zero.params[k].tobytes() for k in base.params)


# -- 8-11: reference runs --------------------------------------------------------


@pytest.fixture(scope="module")
def reference_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("reference")
    base = load_config(REFERENCE)
    runs = {}
    for seed in SEEDS:
        cfg = base.replace(seed=seed, out_dir=str(root / f"seed{seed}"))
        cli.cmd_gen(cfg)
        results = cli.cmd_pipeline(cfg)
        bias = cli.cmd_bias_study(cfg)
        runs[seed] = (cfg, mt.read_results_csv(results), mt.read_results_csv(bias))
    return runs


def _value(rows, method, subset, column):
    (row,) = [r for r in rows if r["method"] == method and r["subset"] == subset]
    return row[column]


def _mean(runs, which, method, subset, column):
    idx = 1 if which == "results" else 2
    return float(np.mean([_value(run[idx], method, subset, column) for run in runs.values()]))


def test_criterion_08_tail_trend(reference_runs, record_property):
    cfg = reference_runs[0][0]
    assert cfg.thresholds.mode == "percentile" and 0.60 <= cfg.thresholds.easy_target <= 0.65
    assert (cfg.loss.lam, cfg.loss.tau) == (0.01, 0.1)
    for seed, (c, _, _) in reference_runs.items():
        report = (Path(c.out_dir) / "map" / "cluster_report.csv").read_text().splitlines()
        easy = float(dict(zip(report[0].split(","), report[1].split(",")))["easy_pct"])
        assert 55.0 <= easy <= 65.0, (seed, easy)
    base_tail = _mean(reference_runs, "results", "baseline", "top5%", "minFDE")
    tract_tail = _mean(reference_runs, "results", "tract", "top5%", "minFDE")
    base_all = _mean(reference_runs, "results", "baseline", "all", "minFDE")
    tract_all = _mean(reference_runs, "results", "tract", "all", "minFDE")
    record_property("top5_minFDE", f"{base_tail:.3f}->{tract_tail:.3f}")
    record_property("all_minFDE", f"{base_all:.3f}->{tract_all:.3f}")
    assert tract_tail <= (1 - TAIL_GAIN) * base_tail
    assert tract_all <= (1 + ALL_DEGRADATION) * base_all


def test_criterion_09_easy_removal_trend(reference_runs, record_property):
    for cfg, _, bias in reference_runs.values():
        assert cfg.bias.fraction == 0.2
        # the full-data row is the phase-1 baseline itself
        assert _value(bias, "full", "top5%", "minFDE") == _value(reference_runs[cfg.seed][1], "baseline", "top5%", "minFDE")
    full = _mean(reference_runs, "bias", "full", "top5%", "minFDE")
    reduced = _mean(reference_runs, "bias", "removed_easy", "top5%", "minFDE")
    record_property("top5_minFDE", f"{full:.3f}->{reduced:.3f}")
    assert reduced < full


def test_criterion_10_offroad_direction(reference_runs, record_property):
    base = _mean(reference_runs, "results", "baseline", "top5%", "HOR")
    tract = _mean(reference_runs, "results", "tract", "top5%", "HOR")
    record_property("top5_HOR", f"{base:.3f}->{tract:.3f}")
    record_property("top5_SOR", f"{_mean(reference_runs, 'results', 'baseline', 'top5%', 'SOR'):.3f}->{_mean(reference_runs, 'results', 'tract', 'top5%', 'SOR'):.3f}")
    assert tract <= base


def test_criterion_11_determinism(reference_runs, tmp_path):
    cfg = reference_runs[0][0]
    again = cfg.replace(out_dir=str(tmp_path / "again"))
    cli.cmd_gen(again)
    second = cli.cmd_pipeline(again)
    first = Path(cfg.out_dir) / "results.csv"
    assert first.read_bytes() == second.read_bytes()
    assert json.loads((Path(cfg.out_dir) / "eval" / "subsets.json").read_text()) == json.loads((tmp_path / "again" / "eval" / "subsets.json").read_text())


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
