"""Dataset map, 4-quarter clustering, prototypes and easy-cluster subsampling."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError

log = logging.getLogger(__name__)

CLUSTERS = ("easy", "hard", "confusing", "trained")

DEFAULT_THETA_E = 0.70
DEFAULT_THETA_VAR = 0.20
DEFAULT_ALPHA = 10.0
DEFAULT_PHI_FLOOR = 1e-3


@dataclass(frozen=True)
class MapPoint:
    sample_id: int
    error: float
    variance: float


@dataclass(frozen=True)
class ClusterAssignment:
    sample_id: int
    cluster: str


@dataclass
class PrototypeSet:
    clusters: tuple  # names of present clusters, in CLUSTERS order
    vectors: np.ndarray  # (n_present, D)
    density: np.ndarray  # (n_present,)
    counts: np.ndarray  # (n_present,)

    def index(self, cluster: str) -> int:
        try:
            return self.clusters.index(cluster)
        except ValueError:
            raise ContractError(f"no prototype for cluster '{cluster}'") from None

    def to_json(self) -> list[dict]:
        return [
            {"cluster": c, "count": int(n), "density": float(d), "vector": v.tolist()}
            for c, n, d, v in zip(self.clusters, self.counts, self.density, self.vectors)
        ]


def build_map(log_) -> list[MapPoint]:
    """Final-epoch error and population variance of each sample's minFDE series."""
    values = np.asarray(log_.values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise DataError(f"dataset map needs >= 2 recordings per sample, got {values.shape[-1] if values.ndim else 0}")
    err = values[:, -1]
    var = values.var(axis=1)
    return [MapPoint(int(s), float(e), float(v)) for s, e, v in zip(log_.sample_ids, err, var)]


def classify(error, variance, theta_e: float, theta_var: float) -> np.ndarray:
    """Vectorised quarter labels. Values on a threshold go to the high side."""
    error = np.asarray(error, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    high_e = error >= theta_e
    high_v = variance >= theta_var
    out = np.empty(error.shape, dtype=object)
    out[high_e & ~high_v] = "hard"
    out[high_e & high_v] = "confusing"
    out[~high_e & ~high_v] = "easy"
    out[~high_e & high_v] = "trained"
    return out


def assign_clusters(points: Sequence[MapPoint], theta_e: float = DEFAULT_THETA_E, theta_var: float = DEFAULT_THETA_VAR) -> list[ClusterAssignment]:
    if not theta_e > 0 or not theta_var >= 0:
        raise ContractError(f"thresholds need theta_e > 0 and theta_var >= 0, got {theta_e}, {theta_var}")
    labels = classify([p.error for p in points], [p.variance for p in points], theta_e, theta_var)
    return [ClusterAssignment(p.sample_id, str(c)) for p, c in zip(points, labels)]


def percentile_thresholds(points: Sequence[MapPoint], easy_target: float = 0.62, iters: int = 60) -> tuple[float, float]:
    """Thresholds at a common quantile ``q`` of error and variance, with ``q``
    bisected so the easy cluster holds about ``easy_target`` of the samples."""
    err = np.array([p.error for p in points])
    var = np.array([p.variance for p in points])

    def easy_share(q):
        te, tv = np.quantile(err, q), np.quantile(var, q)
        return float(np.mean((err < te) & (var < tv))), te, tv

    lo, hi = 0.0, 1.0
    best = None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        share, te, tv = easy_share(mid)
        if best is None or abs(share - easy_target) < abs(best[0] - easy_target):
            best = (share, te, tv)
        if share < easy_target:
            lo = mid
        else:
            hi = mid
    _, te, tv = best
    return float(max(te, np.finfo(float).tiny)), float(tv)


def cluster_report(assignments: Sequence[ClusterAssignment]) -> dict[str, float]:
    """Percentage of samples per cluster."""
    n = len(assignments)
    counts = {c: 0 for c in CLUSTERS}
    for a in assignments:
        counts[a.cluster] += 1
    return {c: 100.0 * counts[c] / n for c in CLUSTERS}


def cluster_density(members: np.ndarray, centre: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    """Summed member distance to the prototype over ``Z log(Z + alpha)`` (unscaled, unclamped)."""
    z = len(members)
    return float(np.linalg.norm(members - centre, axis=1).sum() / (z * math.log(z + alpha)))


def compute_prototypes(
    labels: Sequence[str],
    embeddings: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    density_scale: float = 1.0,
    phi_floor: float = DEFAULT_PHI_FLOOR,
) -> PrototypeSet:
    """Per-cluster mean of unit-normalised embeddings and its density.

    Density is scaled by ``density_scale`` and then clamped below at
    ``phi_floor``. Clusters without members are left out with a warning.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    if emb.ndim != 2 or len(emb) != len(labels):
        raise ContractError(f"need one embedding per assignment, got {emb.shape} for {len(labels)} labels")
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.maximum(norms, 1e-12)
    present, vecs, dens, counts = [], [], [], []
    for c in CLUSTERS:
        members = unit[labels == c]
        if len(members) == 0:
            log.warning("cluster '%s' is empty; its prototype is omitted", c)
            continue
        centre = members.mean(axis=0)
        phi = max(cluster_density(members, centre, alpha) * density_scale, phi_floor)
        present.append(c)
        vecs.append(centre)
        dens.append(phi)
        counts.append(len(members))
    return PrototypeSet(tuple(present), np.array(vecs), np.array(dens), np.array(counts, dtype=np.int64))


def subsample_remove_easy(assignments: Sequence[ClusterAssignment], fraction: float, seed: int) -> list[int]:
    """Drop ``floor(fraction * Z_easy)`` random easy samples; returns retained ids in order."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must lie in [0, 1], got {fraction}")
    easy = sorted(a.sample_id for a in assignments if a.cluster == "easy")
    n_drop = int(math.floor(fraction * len(easy)))
    rng = np.random.default_rng(seed)
    dropped = set(rng.choice(easy, size=n_drop, replace=False).tolist()) if n_drop else set()
    return sorted(a.sample_id for a in assignments if a.sample_id not in dropped)


# -- files --------------------------------------------------------------------


def write_map_csv(path, points: Sequence[MapPoint], assignments: Sequence[ClusterAssignment], stamp: dict | None = None) -> None:
    stamp = stamp or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "variance", "error", "cluster", *stamp])
        for p, a in zip(points, assignments):
            w.writerow([p.sample_id, repr(p.variance), repr(p.error), a.cluster, *stamp.values()])


def read_map_csv(path) -> tuple[list[MapPoint], list[ClusterAssignment]]:
    points, assigns = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = int(row["sample_id"])
            points.append(MapPoint(sid, float(row["error"]), float(row["variance"])))
            assigns.append(ClusterAssignment(sid, row["cluster"]))
    return points, assigns


def write_prototypes_json(path, protos: PrototypeSet, stamp: dict | None = None) -> None:
    doc = dict(stamp or {})
    doc["prototypes"] = protos.to_json()
    with open(path, "w") as fh:
        json.dump(doc, fh)
