"""Command-line driver for the two-phase protocol.

    tract gen        --config cfg.json      synthetic train/val/test JSONL
    tract pipeline   --config cfg.json      phase 1 -> map -> phase 2 -> eval
    tract map        --config cfg.json      dataset map from an existing dynamics log
    tract eval       --config cfg.json --checkpoint p.json --name m
    tract bias-study --config cfg.json      baseline retrained without part of the easy cluster

Every stage writes under ``out_dir`` and stamps its outputs with the config
hash and root seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datamap, metrics, synthgen
from .config import ExperimentConfig, from_dict, load_config, sub_seed
from .errors import StageError, TractError
from .model import FeatureSet, featurize, load_model, predict, save_model
from .trainer import DynamicsLog, train_baseline, train_phase1, train_phase2, write_train_log

log = logging.getLogger("tract")

STAGES = ("gen", "phase1", "map", "phase2", "eval")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Layout:
    root: Path

    def data(self, split: str) -> Path:
        return self.root / "data" / f"{split}.jsonl"

    def __getattr__(self, name):
        files = {
            "p1_params": "phase1/params.json",
            "p1_dynamics": "phase1/dynamics.jsonl",
            "p1_log": "phase1/train_log.csv",
            "p1_embeddings": "phase1/embeddings.json",
            "map_csv": "map/datamap.csv",
            "prototypes": "map/prototypes.json",
            "cluster_report": "map/cluster_report.csv",
            "thresholds": "map/thresholds.json",
            "p2_params": "phase2/params.json",
            "p2_log": "phase2/train_log.csv",
            "baseline_records": "eval/baseline_records.jsonl",
            "tract_records": "eval/tract_records.jsonl",
            "subsets": "eval/subsets.json",
            "results": "results.csv",
            "bias_params": "bias/params.json",
            "bias_log": "bias/train_log.csv",
            "bias_records": "bias/removed_easy_records.jsonl",
            "bias_results": "bias/comparison.csv",
        }
        if name not in files:
            raise AttributeError(name)
        return self.root / files[name]


def _layout(cfg: ExperimentConfig) -> Layout:
    return Layout(Path(cfg.out_dir))


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, stage: str, produced_by: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing {path}; rerun the '{produced_by}' stage first")
    return path


def _load_split(cfg: ExperimentConfig, split: str, stage: str) -> FeatureSet:
    path = _require(_layout(cfg).data(split), stage, "gen")
    try:
        scen = [synthgen.ego_normalize(s) for s in synthgen.read_dataset(path)]
        return featurize(scen, cfg.model_config())
    except TractError as exc:
        raise StageError(stage, f"{path}: {exc}") from None


def write_embeddings(path, sample_ids, embeddings: np.ndarray, stamp: dict) -> None:
    # JSON rather than npz: zip members carry timestamps, which breaks byte-identical reruns
    doc = {**stamp, "sample_ids": [int(s) for s in sample_ids], "embeddings": np.asarray(embeddings).tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return np.asarray(doc["sample_ids"], dtype=np.int64), np.asarray(doc["embeddings"], dtype=np.float64)


# -- stages -------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig) -> dict[str, Path]:
    cfg.validate()
    lay = _layout(cfg)
    mix = cfg.mixture()
    scen = synthgen.generate_dataset(mix, cfg.data.count)
    fractions = [cfg.data.split[s] for s in SPLITS]
    groups = synthgen.split_by_hash([s.sample_id for s in scen], fractions, salt=mix.seed)
    by_id = {s.sample_id: s for s in scen}
    out = {}
    stamp = cfg.stamp()
    for split, ids in zip(SPLITS, groups):
        path = _ensure_parent(lay.data(split))
        with open(path, "w") as fh:
            for sid in ids:
                doc = synthgen.scenario_to_json(by_id[sid])
                doc.update(stamp)
                fh.write(json.dumps(doc) + "\n")
        out[split] = path
        log.info("wrote %d scenarios to %s", len(ids), path)
    return out


def _assignments_for(ids, assignments) -> list[str]:
    by_id = {a.sample_id: a.cluster for a in assignments}
    return [by_id[int(s)] for s in ids]


def stage_phase1(cfg: ExperimentConfig, train: FeatureSet) -> None:
    lay = _layout(cfg)
    mcfg = cfg.model_config()
    res = train_phase1(train, mcfg, cfg.schedule(1), sub_seed(cfg.seed, "init-phase1"), cfg.train.lr, cfg.train.record_stride)
    stamp = cfg.stamp()
    save_model(_ensure_parent(lay.p1_params), res.params, mcfg, stamp)
    res.dynamics.write_jsonl(lay.p1_dynamics, stamp)
    write_train_log(lay.p1_log, res.train_log, stamp)
    write_embeddings(lay.p1_embeddings, train.ids, res.embeddings, stamp)


def stage_map(cfg: ExperimentConfig, dynamics_path: Path | None = None) -> list:
    lay = _layout(cfg)
    dyn = DynamicsLog.read_jsonl(_require(Path(dynamics_path or lay.p1_dynamics), "map", "phase1"), cfg.train.record_stride)
    points = datamap.build_map(dyn)
    th = cfg.thresholds
    if th.mode == "percentile":
        theta_e, theta_var = datamap.percentile_thresholds(points, th.easy_target)
    else:
        theta_e, theta_var = th.theta_e, th.theta_var
    assigns = datamap.assign_clusters(points, theta_e, theta_var)
    stamp = cfg.stamp()
    datamap.write_map_csv(_ensure_parent(lay.map_csv), points, assigns, stamp)
    with open(lay.thresholds, "w") as fh:
        json.dump({"mode": th.mode, "theta_e": theta_e, "theta_var": theta_var, **stamp}, fh)
    report = datamap.cluster_report(assigns)
    counts = {c: 0 for c in datamap.CLUSTERS}
    for a in assigns:
        counts[a.cluster] += 1
    with open(lay.cluster_report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta_e", "theta_var", *(f"{c}_pct" for c in datamap.CLUSTERS), *(f"{c}_count" for c in datamap.CLUSTERS), *stamp])
        w.writerow([repr(theta_e), repr(theta_var), *(f"{report[c]:.2f}" for c in datamap.CLUSTERS), *(counts[c] for c in datamap.CLUSTERS), *stamp.values()])
    if lay.p1_embeddings.exists():
        ids, emb = read_embeddings(lay.p1_embeddings)
        labels = _assignments_for(ids, assigns)
        l = cfg.loss
        protos = datamap.compute_prototypes(labels, emb, l.alpha, l.density_scale, l.phi_floor)
        datamap.write_prototypes_json(lay.prototypes, protos, stamp)
    log.info("dataset map: theta_e=%.4f theta_var=%.4f %s", theta_e, theta_var, report)
    return assigns


def stage_phase2(cfg: ExperimentConfig, train: FeatureSet) -> None:
    lay = _layout(cfg)
    _, assigns = datamap.read_map_csv(_require(lay.map_csv, "phase2", "map"))
    labels = _assignments_for(train.ids, assigns)
    frozen = None
    if cfg.train.prototype_source == "phase1_frozen":
        ids, frozen = read_embeddings(_require(lay.p1_embeddings, "phase2", "phase1"))
        if not np.array_equal(ids, train.ids):
            raise StageError("phase2", f"{lay.p1_embeddings} does not match the training split; rerun 'phase1'")
    mcfg = cfg.model_config()
    res = train_phase2(
        train, mcfg, cfg.schedule(2), labels, cfg.contrastive(), sub_seed(cfg.seed, "init-phase2"), cfg.train.lr, cfg.train.prototype_source, frozen
    )
    stamp = cfg.stamp()
    save_model(_ensure_parent(lay.p2_params), res.params, mcfg, stamp)
    write_train_log(lay.p2_log, res.train_log, stamp)


def _evaluate(cfg: ExperimentConfig, params, test: FeatureSet) -> list:
    pred = predict(params, test, cfg.model_config())
    return metrics.evaluate(pred, test.future, test.drivable, test.ids, cfg.eval.offroad_mode)


def _load_subsets(path: Path) -> dict[int, list[int]]:
    doc = json.loads(path.read_text())
    return {int(k): v for k, v in doc["subsets"].items()}


def stage_eval(cfg: ExperimentConfig, test: FeatureSet) -> Path:
    lay = _layout(cfg)
    mcfg = cfg.model_config()
    stamp = cfg.stamp()
    base_params, _ = load_model(_require(lay.p1_params, "eval", "phase1"), mcfg)
    tract_params, _ = load_model(_require(lay.p2_params, "eval", "phase2"), mcfg)
    base = _evaluate(cfg, base_params, test)
    subsets = metrics.select_challenging(base, cfg.eval.percentiles)
    tract = _evaluate(cfg, tract_params, test)
    metrics.write_records_jsonl(_ensure_parent(lay.baseline_records), base, stamp)
    metrics.write_records_jsonl(lay.tract_records, tract, stamp)
    with open(lay.subsets, "w") as fh:
        json.dump({"anchor": "baseline", "subsets": {str(k): v for k, v in subsets.items()}, **stamp}, fh)
    rows = metrics.results_rows("baseline", base, subsets) + metrics.results_rows("tract", tract, subsets)
    metrics.write_results_csv(lay.results, rows, stamp)
    return lay.results


def cmd_pipeline(cfg: ExperimentConfig, start: str = "phase1") -> Path:
    cfg.validate()
    if start not in STAGES:
        raise StageError("pipeline", f"unknown stage {start!r}; choose from {STAGES}")
    todo = STAGES[STAGES.index(start) :]
    if "gen" in todo:
        cmd_gen(cfg)
    train = _load_split(cfg, "train", todo[0] if todo[0] != "gen" else "phase1")
    if "phase1" in todo:
        stage_phase1(cfg, train)
    if "map" in todo:
        stage_map(cfg)
    if "phase2" in todo:
        stage_phase2(cfg, train)
    test = _load_split(cfg, "test", "eval")
    return stage_eval(cfg, test)


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path, name: str) -> Path:
    """Evaluate any checkpoint on the baseline-anchored subsets of a finished pipeline."""
    lay = _layout(cfg)
    subsets = _load_subsets(_require(lay.subsets, "eval", "pipeline"))
    params, _ = load_model(_require(Path(checkpoint), "eval", "phase1/phase2"), cfg.model_config())
    test = _load_split(cfg, "test", "eval")
    records = _evaluate(cfg, params, test)
    stamp = cfg.stamp()
    metrics.write_records_jsonl(lay.root / "eval" / f"{name}_records.jsonl", records, stamp)
    out = lay.root / "eval" / f"{name}_results.csv"
    metrics.write_results_csv(out, metrics.results_rows(name, records, subsets), stamp)
    return out


def cmd_bias_study(cfg: ExperimentConfig, fraction: float | None = None) -> Path:
    """Retrain the baseline without ``fraction`` of the easy cluster and compare on
    the baseline-anchored subsets. The retrain reuses the phase-1 seed stream, so
    ``fraction=0`` reproduces the phase-1 baseline."""
    fraction = cfg.bias.fraction if fraction is None else fraction
    if not 0.0 <= fraction <= 1.0:
        raise StageError("bias-study", f"fraction must lie in [0, 1], got {fraction}")
    lay = _layout(cfg)
    _, assigns = datamap.read_map_csv(_require(lay.map_csv, "bias-study", "map"))
    base = metrics.read_records_jsonl(_require(lay.baseline_records, "bias-study", "eval"))
    subsets = _load_subsets(_require(lay.subsets, "bias-study", "eval"))
    retained = datamap.subsample_remove_easy(assigns, fraction, sub_seed(cfg.seed, "subsample"))
    train = _load_split(cfg, "train", "bias-study")
    reduced = train.select_ids(retained)
    mcfg = cfg.model_config()
    res = train_baseline(reduced, mcfg, cfg.schedule(1), sub_seed(cfg.seed, "init-phase1"), cfg.train.lr)
    stamp = cfg.stamp()
    save_model(_ensure_parent(lay.bias_params), res.params, mcfg, {**stamp, "fraction": fraction})
    write_train_log(lay.bias_log, res.train_log, stamp)
    test = _load_split(cfg, "test", "bias-study")
    records = _evaluate(cfg, res.params, test)
    metrics.write_records_jsonl(lay.bias_records, records, stamp)
    rows = metrics.results_rows("full", base, subsets) + metrics.results_rows("removed_easy", records, subsets)
    with open(lay.bias_results, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "train_size", "fraction", "subset", "n", *metrics.METRIC_COLUMNS, *stamp])
        for row in rows:
            size = len(train) if row["method"] == "full" else len(reduced)
            frac = 0.0 if row["method"] == "full" else fraction
            w.writerow([row["method"], size, frac, row["subset"], row["n"], *(f"{row[c]:.6f}" for c in metrics.METRIC_COLUMNS), *stamp.values()])
    return lay.bias_results


# -- entry point --------------------------------------------------------------


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tract", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", help="override the output directory")
        return p

    common(sub.add_parser("gen", help="generate the synthetic dataset"))
    p = common(sub.add_parser("pipeline", help="phase 1, dataset map, phase 2 and evaluation"))
    p.add_argument("--from", dest="start", default="phase1", choices=STAGES, help="first stage to run")
    p = common(sub.add_parser("map", help="dataset map and clusters from a dynamics log"))
    p.add_argument("--dynamics", type=Path, help="dynamics JSONL (default: the phase-1 log under --out)")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the baseline-anchored subsets"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--name", required=True, help="method name used in the output files")
    p = common(sub.add_parser("bias-study", help="retrain the baseline with part of the easy cluster removed"))
    p.add_argument("--fraction", type=float, help="share of the easy cluster to remove (default from config)")
    sub.add_parser("defaults", help="print the default config as JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "defaults":
            print(json.dumps(from_dict({}).to_dict(), indent=2))
            return 0
        cfg = _resolve_config(args)
        if args.verb == "gen":
            paths = cmd_gen(cfg)
            print("\n".join(str(p) for p in paths.values()))
        elif args.verb == "pipeline":
            print(cmd_pipeline(cfg, args.start))
        elif args.verb == "map":
            stage_map(cfg, args.dynamics)
            print(_layout(cfg).map_csv)
        elif args.verb == "eval":
            print(cmd_eval(cfg, args.checkpoint, args.name))
        elif args.verb == "bias-study":
            print(cmd_bias_study(cfg, args.fraction))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TractError as exc:
        print(f"error: [{args.verb}] {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
