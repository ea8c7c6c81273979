"""Two-phase training: EWTA regression with dynamics logging, then EWTA plus
the prototypical contrastive term."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nnkit as nk
from .datamap import PrototypeSet, compute_prototypes
from .errors import ConfigurationError, ContractError, DataError, TrainingError
from .model import FeatureSet, ModelConfig, as_values, decode, embed_all, encode, init_params, predict
from .pcl import ContrastiveBatch, ContrastiveConfig, combined_loss

log = logging.getLogger(__name__)

PROTOTYPE_SOURCES = ("live_per_epoch", "phase1_frozen")
LOG_COLUMNS = ("epoch", "stage_k", "L_reg", "L_ins", "L_proto", "total")


@dataclass(frozen=True)
class EwtaSchedule:
    stages: tuple = (20, 10, 5, 2, 1)
    epochs_per_stage: int = 5
    batch_size: int = 256

    def validate(self, num_hypotheses: int) -> None:
        s = list(self.stages)
        if not s or s[-1] != 1 or any(a <= b for a, b in zip(s, s[1:])):
            raise ConfigurationError(f"EWTA stages must be strictly decreasing and end at 1, got {s}")
        if s[0] > num_hypotheses:
            raise ConfigurationError(f"first EWTA stage {s[0]} exceeds K={num_hypotheses}")
        if self.epochs_per_stage < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs_per_stage and batch_size must be >= 1")

    @property
    def total_epochs(self) -> int:
        return len(self.stages) * self.epochs_per_stage

    def k_at(self, epoch: int) -> int:
        """Winner count for a 1-based epoch number."""
        return self.stages[(epoch - 1) // self.epochs_per_stage]


@dataclass
class DynamicsLog:
    sample_ids: np.ndarray
    stride: int = 1
    epochs: list = field(default_factory=list)
    columns: list = field(default_factory=list)

    def append(self, epoch: int, minfde: np.ndarray) -> None:
        minfde = np.asarray(minfde, dtype=np.float64)
        if minfde.shape != self.sample_ids.shape or not np.all(np.isfinite(minfde)) or np.any(minfde < 0):
            raise DataError(f"dynamics record for epoch {epoch} must be finite, >= 0 and cover every sample")
        self.epochs.append(int(epoch))
        self.columns.append(minfde)

    @property
    def values(self) -> np.ndarray:
        """(N, R) matrix of recorded minFDEs."""
        if not self.columns:
            return np.zeros((len(self.sample_ids), 0))
        return np.stack(self.columns, axis=1)

    def write_jsonl(self, path, stamp: dict | None = None) -> None:
        extra = dict(stamp or {})
        with open(path, "w") as fh:
            for sid_idx, sid in enumerate(self.sample_ids):
                for epoch, col in zip(self.epochs, self.columns):
                    fh.write(json.dumps({"sample_id": int(sid), "epoch": epoch, "minfde": float(col[sid_idx]), **extra}) + "\n")

    @classmethod
    def read_jsonl(cls, path, stride: int = 1) -> "DynamicsLog":
        rows: dict[int, dict[int, float]] = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    rows.setdefault(int(d["sample_id"]), {})[int(d["epoch"])] = float(d["minfde"])
        ids = sorted(rows)
        epochs = sorted(rows[ids[0]]) if ids else []
        if any(sorted(r) != epochs for r in rows.values()):
            raise DataError(f"{path}: samples have differing recorded epochs")
        out = cls(np.array(ids, dtype=np.int64), stride)
        for e in epochs:
            out.append(e, np.array([rows[s][e] for s in ids]))
        return out


@dataclass
class TrainResult:
    params: dict
    train_log: list
    dynamics: DynamicsLog | None = None
    embeddings: np.ndarray | None = None


# -- losses -------------------------------------------------------------------


def _hypothesis_distance(pred: nk.Value, future: np.ndarray, k_hyp: int) -> nk.Value:
    b, t = future.shape[0], future.shape[1]
    target = np.broadcast_to(future[:, None], (b, k_hyp, t, 2)).reshape(b * k_hyp * t, 2)
    dist = nk.l2norm(pred.reshape(b * k_hyp * t, 2) - nk.constant(target), axis=1)
    return dist.reshape(b * k_hyp, t).mean(axis=1).reshape(b, k_hyp)


def ewta_loss(pred: nk.Value, future: np.ndarray, k: int, num_hypotheses: int) -> nk.Value:
    """Batch mean of the average trajectory error of each sample's ``k`` best hypotheses.

    ``pred`` is flat (B, K*T*2). Winners are a constant index set (stable sort,
    so ties go to the lower hypothesis index).
    """
    if not 1 <= k <= num_hypotheses:
        raise ContractError(f"winner count must lie in [1, {num_hypotheses}], got {k}")
    per_hyp = _hypothesis_distance(pred, future, num_hypotheses)
    win = np.argsort(per_hyp.data, axis=1, kind="stable")[:, :k]
    weights = np.zeros(per_hyp.shape)
    np.put_along_axis(weights, win, 1.0 / k, axis=1)
    return (per_hyp * nk.constant(weights)).sum() / future.shape[0]


def ewta_is_smooth(pred: np.ndarray, future: np.ndarray, k: int, num_hypotheses: int, margin: float = 1e-3) -> bool:
    """False at winner ties (k-th vs (k+1)-th distance) or zero-distance points."""
    b, t = future.shape[0], future.shape[1]
    p = np.asarray(pred).reshape(b, num_hypotheses, t, 2)
    dist = np.linalg.norm(p - future[:, None], axis=-1)
    if dist.min() < margin:
        return False
    if k == num_hypotheses:
        return True
    srt = np.sort(dist.mean(axis=2), axis=1)
    return bool(np.all(srt[:, k] - srt[:, k - 1] > margin))


def min_fde_all(params, feats: FeatureSet, cfg: ModelConfig) -> np.ndarray:
    pred = predict(params, feats, cfg)
    return np.linalg.norm(pred[:, :, -1] - feats.future[:, None, -1], axis=-1).min(axis=1)


# -- training loop ------------------------------------------------------------


def _train(
    feats: FeatureSet,
    cfg: ModelConfig,
    schedule: EwtaSchedule,
    seed: int,
    lr: float,
    record_stride: int | None = None,
    labels: Sequence[str] | None = None,
    closs: ContrastiveConfig | None = None,
    prototype_source: str = "live_per_epoch",
    frozen_embeddings: np.ndarray | None = None,
) -> TrainResult:
    if len(feats) == 0:
        raise ContractError("training set is empty")
    schedule.validate(cfg.num_hypotheses)
    n = len(feats)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    state = nk.OptimState(lr=lr)
    dynamics = DynamicsLog(feats.ids.copy(), record_stride) if record_stride else None
    labels_arr = np.asarray(labels, dtype=object) if labels is not None else None
    protos: PrototypeSet | None = None
    if closs is not None and prototype_source == "phase1_frozen":
        protos = compute_prototypes(labels_arr, frozen_embeddings, closs.alpha, closs.density_scale, closs.phi_floor)

    train_log = []
    for epoch in range(1, schedule.total_epochs + 1):
        k = schedule.k_at(epoch)
        if closs is not None and prototype_source == "live_per_epoch":
            protos = compute_prototypes(labels_arr, embed_all(params, feats, cfg), closs.alpha, closs.density_scale, closs.phi_floor)
        perm = rng.permutation(n)
        sums = dict.fromkeys(LOG_COLUMNS[2:], 0.0)
        n_batches = 0
        for b_idx, lo in enumerate(range(0, n, schedule.batch_size)):
            idx = perm[lo : lo + schedule.batch_size]
            batch = feats.subset(idx)
            values = as_values(params)
            v = encode(values, batch, cfg)
            l_reg = ewta_loss(decode(values, v, cfg), batch.future, k, cfg.num_hypotheses)
            if closs is not None:
                cb = ContrastiveBatch(nk.normalize(v, axis=1), list(labels_arr[idx]), protos, closs.tau)
                total, parts = combined_loss(l_reg, cb, closs.lam, closs.exclude_self_in_denominator, closs.reduction)
            else:
                total = l_reg
                parts = {"L_reg": float(l_reg.data), "L_ins": 0.0, "L_proto": 0.0, "total": float(l_reg.data)}
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            nk.backward(total)
            try:
                params = nk.adam_step(params, {name: val.grad for name, val in values.items()}, state)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b_idx}: {exc}") from None
            for key in sums:
                sums[key] += parts[key]
            n_batches += 1
        row = {"epoch": epoch, "stage_k": k, **{key: val / n_batches for key, val in sums.items()}}
        train_log.append(row)
        log.info("epoch %d k=%d L_reg=%.4f total=%.4f", epoch, k, row["L_reg"], row["total"])
        if dynamics is not None and epoch % record_stride == 0:
            dynamics.append(epoch, min_fde_all(params, feats, cfg))
    return TrainResult(params, train_log, dynamics)


def train_phase1(feats: FeatureSet, cfg: ModelConfig, schedule: EwtaSchedule, seed: int, lr: float = 1e-3, record_stride: int = 1) -> TrainResult:
    """EWTA training that logs every sample's minFDE each ``record_stride`` epochs
    and returns the final-epoch embeddings."""
    if record_stride < 1:
        raise ConfigurationError("record_stride must be >= 1")
    res = _train(feats, cfg, schedule, seed, lr, record_stride=record_stride)
    res.embeddings = embed_all(res.params, feats, cfg)
    return res


def train_baseline(feats: FeatureSet, cfg: ModelConfig, schedule: EwtaSchedule, seed: int, lr: float = 1e-3) -> TrainResult:
    """Phase-1-style EWTA training without dynamics logging."""
    return _train(feats, cfg, schedule, seed, lr)


def train_phase2(
    feats: FeatureSet,
    cfg: ModelConfig,
    schedule: EwtaSchedule,
    labels: Sequence[str],
    closs: ContrastiveConfig,
    seed: int,
    lr: float = 1e-3,
    prototype_source: str = "live_per_epoch",
    phase1_embeddings: np.ndarray | None = None,
) -> TrainResult:
    """Fresh-initialised training on ``L_reg + lam * (L_ins + L_proto)``.

    Cluster labels stay fixed; prototypes are rebuilt from the current model at
    the start of every epoch (``live_per_epoch``) or once from the phase-1
    embeddings (``phase1_frozen``).
    """
    if len(labels) != len(feats):
        raise ContractError(f"need a cluster label for every sample ({len(labels)} for {len(feats)})")
    if closs.lam < 0 or closs.tau <= 0:
        raise ContractError(f"need lambda >= 0 and tau > 0, got {closs.lam}, {closs.tau}")
    if prototype_source not in PROTOTYPE_SOURCES:
        raise ConfigurationError(f"prototype_source must be one of {PROTOTYPE_SOURCES}")
    if prototype_source == "phase1_frozen" and phase1_embeddings is None:
        raise ContractError("phase1_frozen prototypes need the phase-1 embeddings")
    return _train(feats, cfg, schedule, seed, lr, labels=labels, closs=closs, prototype_source=prototype_source, frozen_embeddings=phase1_embeddings)


def write_train_log(path, rows: Sequence[dict], stamp: dict | None = None) -> None:
    stamp = dict(stamp or {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*LOG_COLUMNS, *stamp])
        for r in rows:
            w.writerow([r["epoch"], r["stage_k"], *(repr(float(r[c])) for c in LOG_COLUMNS[2:]), *stamp.values()])
