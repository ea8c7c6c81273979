"""Evaluation metrics: displacement errors, KDE-NLL, off-road rates, tail subsets."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

BANDWIDTH_FLOOR = 0.05
DENSITY_FLOOR = 1e-300
PERCENTILES = (1, 2, 3, 4, 5)
METRIC_COLUMNS = ("minADE", "minFDE", "KDE-NLL", "HOR", "SOR")


@dataclass
class EvalRecord:
    sample_id: int
    min_ade: float
    min_fde: float
    kde_nll: float
    hor_flag: bool
    sor_offroad_points: int
    sor_total_points: int


# -- displacement -------------------------------------------------------------


def min_ade_fde(predictions: np.ndarray, future: np.ndarray) -> tuple[float, float]:
    """Best-of-K ADE and FDE; the two minima may come from different hypotheses."""
    dist = np.linalg.norm(np.asarray(predictions) - np.asarray(future)[None], axis=-1)
    return float(dist.mean(axis=1).min()), float(dist[:, -1].min())


def min_ade_fde_batch(predictions: np.ndarray, future: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised over samples: predictions (N, K, T, 2), future (N, T, 2)."""
    dist = np.linalg.norm(predictions - future[:, None], axis=-1)
    return dist.mean(axis=2).min(axis=1), dist[:, :, -1].min(axis=1)


# -- KDE-NLL ------------------------------------------------------------------


def kde_nll(predictions: np.ndarray, future: np.ndarray, floor: float = BANDWIDTH_FLOOR) -> float:
    """Mean over timesteps of -log p(gt) under a diagonal Gaussian KDE of the K points.

    Per-axis bandwidth follows Scott's rule, ``std * K**(-1/6)`` (std with
    ddof=1), floored at ``floor`` metres.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    k = pred.shape[0]
    if k < 2:
        raise DataError("KDE-NLL needs at least 2 hypotheses")
    bw = np.maximum(pred.std(axis=0, ddof=1) * k ** (-1.0 / 6.0), floor)  # (T, 2)
    z = (np.asarray(future)[None] - pred) / bw[None]  # (K, T, 2)
    log_kernel = -0.5 * (z * z).sum(axis=-1) - np.log(2 * math.pi * bw[:, 0] * bw[:, 1])[None]
    m = log_kernel.max(axis=0)
    log_density = m + np.log(np.exp(log_kernel - m).mean(axis=0))
    log_density = np.maximum(log_density, math.log(DENSITY_FLOOR))
    return float(-log_density.mean())


# -- off-road -----------------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def inside_convex(points: np.ndarray, poly: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Half-plane test against a convex polygon; points on the boundary are inside."""
    poly = np.asarray(poly, dtype=np.float64)
    area = polygon_area(poly)
    if not abs(area) > 1e-12:
        raise DataError("degenerate drivable polygon (zero area)")
    sign = 1.0 if area > 0 else -1.0
    a = poly
    b = np.roll(poly, -1, axis=0)
    edge = b - a  # (n, 2)
    rel = points[:, None, :] - a[None]  # (M, n, 2)
    cross = edge[None, :, 0] * rel[..., 1] - edge[None, :, 1] * rel[..., 0]
    scale = np.linalg.norm(edge, axis=1)[None]
    return np.all(sign * cross >= -eps * scale, axis=1)


def on_road(points: np.ndarray, polygons: Sequence[np.ndarray]) -> np.ndarray:
    if len(polygons) == 0:
        raise DataError("off-road check needs at least one polygon")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    inside = np.zeros(len(pts), dtype=bool)
    for poly in polygons:
        inside |= inside_convex(pts, poly)
    return inside


def offroad_rates(predictions: np.ndarray, polygons: Sequence[np.ndarray]) -> tuple[bool, int, int]:
    """(hor_flag, off-road point count, total point count) over all given points."""
    inside = on_road(predictions, polygons)
    off = int((~inside).sum())
    return off >= 1, off, int(inside.size)


# -- evaluation ---------------------------------------------------------------


def evaluate(predictions: np.ndarray, future: np.ndarray, drivable: Sequence, sample_ids: Sequence[int], offroad_mode: str = "all") -> list[EvalRecord]:
    """Per-sample records. ``offroad_mode='best'`` restricts HOR/SOR to the minFDE hypothesis."""
    if offroad_mode not in ("all", "best"):
        raise DataError(f"unknown offroad_mode {offroad_mode!r}")
    ade, fde = min_ade_fde_batch(predictions, future)
    records = []
    for i, sid in enumerate(sample_ids):
        pred = predictions[i]
        if offroad_mode == "best":
            best = int(np.argmin(np.linalg.norm(pred[:, -1] - future[i, -1], axis=-1)))
            pred = pred[best : best + 1]
        hor, off, total = offroad_rates(pred, drivable[i])
        records.append(EvalRecord(int(sid), float(ade[i]), float(fde[i]), kde_nll(predictions[i], future[i]), hor, off, total))
    return records


def select_challenging(baseline: Sequence[EvalRecord], percentiles: Iterable[int] = PERCENTILES) -> dict[int, list[int]]:
    """Top-p% sample ids by baseline minFDE (descending, ties by lower id); nested prefixes."""
    ordered = sorted(baseline, key=lambda r: (-r.min_fde, r.sample_id))
    n = len(ordered)
    return {int(p): [r.sample_id for r in ordered[: -(-int(p) * n // 100)]] for p in percentiles}


def summarize(records: Sequence[EvalRecord]) -> dict[str, float]:
    n = len(records)
    off = sum(r.sor_offroad_points for r in records)
    total = sum(r.sor_total_points for r in records)
    return {
        "minADE": sum(r.min_ade for r in records) / n,
        "minFDE": sum(r.min_fde for r in records) / n,
        "KDE-NLL": sum(r.kde_nll for r in records) / n,
        "HOR": sum(r.hor_flag for r in records) / n,
        "SOR": off / total if total else 0.0,
    }


def results_rows(method: str, records: Sequence[EvalRecord], subsets: Mapping[int, Sequence[int]]) -> list[dict]:
    by_id = {r.sample_id: r for r in records}
    rows = []
    for p in sorted(subsets):
        chosen = [by_id[s] for s in subsets[p]]
        rows.append({"method": method, "subset": f"top{p}%", "n": len(chosen), **summarize(chosen)})
    rows.append({"method": method, "subset": "all", "n": len(records), **summarize(records)})
    return rows


def write_results_csv(path, rows: Sequence[dict], stamp: Mapping | None = None) -> None:
    stamp = dict(stamp or {})
    cols = ["method", "subset", "n", *METRIC_COLUMNS, *stamp]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            vals = [row["method"], row["subset"], row["n"]] + [f"{row[c]:.6f}" for c in METRIC_COLUMNS]
            w.writerow(vals + list(stamp.values()))


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for c in METRIC_COLUMNS:
            row[c] = float(row[c])
        row["n"] = int(row["n"])
    return rows


def write_records_jsonl(path, records: Sequence[EvalRecord], stamp: Mapping | None = None) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({**asdict(r), **dict(stamp or {})}) + "\n")


def read_records_jsonl(path) -> list[EvalRecord]:
    names = EvalRecord.__dataclass_fields__
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                out.append(EvalRecord(**{k: doc[k] for k in names}))
    return out
