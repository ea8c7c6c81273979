"""Encoder-decoder trajectory predictor.

Three feed-forward channels (ego history, mean-pooled neighbours, corridor
context) are fused into the bottleneck embedding ``v``. A two-layer decoder
maps ``v`` to ``K`` hypotheses of per-step displacements whose cumulative sums
are the predicted positions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import nnkit as nk
from .errors import ConfigurationError, DataError
from .synthgen import Scenario, corridor_centerline

MAP_LOOKAHEAD = (3.0, 8.0, 15.0, 25.0)
MAP_FEATURES = 2 + 4 * len(MAP_LOOKAHEAD)


@dataclass(frozen=True)
class ModelConfig:
    obs_len: int = 8
    pred_len: int = 6
    max_neighbors: int = 4
    embed_dim: int = 64
    num_hypotheses: int = 20
    hist_width: int = 64
    nb_width: int = 32
    map_width: int = 32
    dec_width: int = 128
    pos_scale: float = 10.0
    disp_scale: float = 5.0

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0 and f.name != "max_neighbors":
                raise ConfigurationError(f"model.{f.name} must be positive")


@dataclass
class Embedding:
    sample_id: int
    v: np.ndarray


@dataclass
class PredictionSet:
    sample_id: int
    hypotheses: np.ndarray  # (K, T, 2)


@dataclass
class FeatureSet:
    """Model-ready arrays for a list of ego-normalised scenarios."""

    ids: np.ndarray  # (N,)
    hist: np.ndarray  # (N, 2L)
    nb: np.ndarray  # (N, N_nb, 2L)
    nb_mask: np.ndarray  # (N, N_nb)
    map: np.ndarray  # (N, MAP_FEATURES)
    future: np.ndarray  # (N, T, 2)
    drivable: list
    labels: list

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(
            self.ids[idx],
            self.hist[idx],
            self.nb[idx],
            self.nb_mask[idx],
            self.map[idx],
            self.future[idx],
            [self.drivable[i] for i in idx],
            [self.labels[i] for i in idx],
        )

    def select_ids(self, sample_ids: Sequence[int]) -> "FeatureSet":
        pos = {int(s): i for i, s in enumerate(self.ids)}
        return self.subset([pos[int(s)] for s in sample_ids])


# -- context features ---------------------------------------------------------


def map_features(drivable: Sequence[np.ndarray], n_corridor: int) -> np.ndarray:
    """Corridor context in the ego frame.

    Signed clearance to the left and right corridor boundary at the ego
    position (in half-widths), then for each look-ahead arc distance the
    centerline point (scaled by 1/10 m) and the local heading (cos, sin).
    """
    line, hw = corridor_centerline(drivable[:n_corridor])
    seg = np.diff(line, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    seg_len = np.where(seg_len > 0, seg_len, 1e-12)
    units = seg / seg_len[:, None]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    t = np.clip(-(line[:-1] * units).sum(axis=1), 0.0, seg_len)
    proj = line[:-1] + t[:, None] * units
    k = int(np.argmin(np.linalg.norm(proj, axis=1)))
    normal = np.array([-units[k, 1], units[k, 0]])
    offset = -float(proj[k] @ normal)
    s0 = cum[k] + t[k]

    out = [(hw - offset) / hw, (hw + offset) / hw]
    for d in MAP_LOOKAHEAD:
        s = s0 + d
        j = int(np.searchsorted(cum, s, side="right") - 1)
        j = min(max(j, 0), len(units) - 1)
        p = line[j] + (s - cum[j]) * units[j]
        out.extend([p[0] / 10.0, p[1] / 10.0, units[j, 0], units[j, 1]])
    return np.array(out)


def featurize(scenarios: Sequence[Scenario], cfg: ModelConfig) -> FeatureSet:
    """Stack ego-normalised scenarios into arrays; rejects non-finite input."""
    n = len(scenarios)
    L, T, nn = cfg.obs_len, cfg.pred_len, cfg.max_neighbors
    hist = np.zeros((n, 2 * L))
    nb = np.zeros((n, nn, 2 * L))
    mask = np.zeros((n, nn), dtype=bool)
    mfeat = np.zeros((n, MAP_FEATURES))
    fut = np.zeros((n, T, 2))
    for i, s in enumerate(scenarios):
        if s.history.shape != (L, 2) or s.future.shape != (T, 2):
            raise DataError(f"sample {s.sample_id}: expected ({L}, {T}) horizons")
        for name, arr in (("history", s.history), ("future", s.future), ("neighbors", s.neighbors)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"sample {s.sample_id}: non-finite coordinate in {name}")
        hist[i] = s.history.ravel()
        m = min(nn, len(s.neighbor_mask))
        for j in range(m):
            if s.neighbor_mask[j]:
                nb[i, j] = s.neighbors[j].ravel()
                mask[i, j] = True
        mfeat[i] = map_features(s.drivable, s.n_corridor)
        fut[i] = s.future
    ids = np.array([s.sample_id for s in scenarios], dtype=np.int64)
    return FeatureSet(ids, hist, nb, mask, mfeat, fut, [s.drivable for s in scenarios], [s.maneuver_label for s in scenarios])


# -- parameters ---------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    L2 = 2 * cfg.obs_len
    fused = cfg.hist_width + cfg.nb_width + cfg.map_width
    out = cfg.num_hypotheses * cfg.pred_len * 2
    return {
        "hist.W1": (L2, cfg.hist_width),
        "hist.b1": (1, cfg.hist_width),
        "hist.W2": (cfg.hist_width, cfg.hist_width),
        "hist.b2": (1, cfg.hist_width),
        "nb.W1": (L2, cfg.nb_width),
        "nb.b1": (1, cfg.nb_width),
        "nb.W2": (cfg.nb_width, cfg.nb_width),
        "nb.b2": (1, cfg.nb_width),
        "map.W1": (MAP_FEATURES, cfg.map_width),
        "map.b1": (1, cfg.map_width),
        "map.W2": (cfg.map_width, cfg.map_width),
        "map.b2": (1, cfg.map_width),
        "fuse.W": (fused, cfg.embed_dim),
        "fuse.b": (1, cfg.embed_dim),
        "dec.W1": (cfg.embed_dim, cfg.dec_width),
        "dec.b1": (1, cfg.dec_width),
        "dec.W2": (cfg.dec_width, out),
        "dec.b2": (1, out),
    }


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """LeCun-normal weights, zero biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.split(".")[1].startswith("W"):
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise ConfigurationError(f"parameter names do not match model: {sorted(set(params) ^ set(expected))}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ConfigurationError(f"parameter '{name}' has shape {params[name].shape}, expected {shape}")


# -- forward ------------------------------------------------------------------


def _mlp2(x, p, prefix):
    h = nk.tanh(x @ p[prefix + ".W1"] + p[prefix + ".b1"])
    return nk.tanh(h @ p[prefix + ".W2"] + p[prefix + ".b2"])


def _pool_matrix(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of valid neighbours and the (B, n_valid) mean-pooling matrix."""
    b, n = mask.shape
    rows = np.flatnonzero(mask.ravel())
    pool = np.zeros((b, len(rows)))
    counts = mask.sum(axis=1)
    for col, r in enumerate(rows):
        owner = r // n
        pool[owner, col] = 1.0 / counts[owner]
    return rows, pool


def encode(params: Mapping[str, nk.Value], feats: FeatureSet, cfg: ModelConfig) -> nk.Value:
    """Embeddings ``v`` of shape (B, D)."""
    b = len(feats)
    h = _mlp2(nk.constant(feats.hist / cfg.pos_scale), params, "hist")
    rows, pool = _pool_matrix(feats.nb_mask)
    if len(rows):
        nb_in = feats.nb.reshape(b * cfg.max_neighbors, -1)[rows] / cfg.pos_scale
        n = nk.constant(pool) @ _mlp2(nk.constant(nb_in), params, "nb")
    else:
        n = nk.constant(np.zeros((b, cfg.nb_width)))
    m = _mlp2(nk.constant(feats.map), params, "map")
    return nk.concat([h, n, m], axis=1) @ params["fuse.W"] + params["fuse.b"]


def _cumsum_matrix(pred_len: int) -> np.ndarray:
    tri = np.triu(np.ones((pred_len, pred_len)))
    return np.kron(tri, np.eye(2))


def decode(params: Mapping[str, nk.Value], v: nk.Value, cfg: ModelConfig) -> nk.Value:
    """Hypothesis positions, flat (B, K*T*2) in [k][t][xy] order."""
    b = v.shape[0]
    k, t = cfg.num_hypotheses, cfg.pred_len
    h = nk.tanh(v @ params["dec.W1"] + params["dec.b1"])
    disp = (h @ params["dec.W2"] + params["dec.b2"]) * cfg.disp_scale
    pos = disp.reshape(b * k, t * 2) @ nk.constant(_cumsum_matrix(t))
    return pos.reshape(b, k * t * 2)


def as_values(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, nk.Value]:
    return {k: nk.Value(v, requires_grad=requires_grad) for k, v in params.items()}


def embed_all(params: Mapping[str, np.ndarray], feats: FeatureSet, cfg: ModelConfig, chunk: int = 1024) -> np.ndarray:
    consts = as_values(params, requires_grad=False)
    out = [encode(consts, feats.subset(np.arange(i, min(i + chunk, len(feats)))), cfg).data for i in range(0, len(feats), chunk)]
    return np.concatenate(out, axis=0)


def predict(params: Mapping[str, np.ndarray], feats: FeatureSet, cfg: ModelConfig, chunk: int = 1024) -> np.ndarray:
    """Evaluation-mode hypotheses of shape (N, K, T, 2)."""
    consts = as_values(params, requires_grad=False)
    out = []
    for i in range(0, len(feats), chunk):
        part = feats.subset(np.arange(i, min(i + chunk, len(feats))))
        out.append(decode(consts, encode(consts, part, cfg), cfg).data)
    flat = np.concatenate(out, axis=0)
    return flat.reshape(len(feats), cfg.num_hypotheses, cfg.pred_len, 2)


def encode_scenario(scen: Scenario, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> Embedding:
    feats = featurize([scen], cfg)
    return Embedding(scen.sample_id, embed_all(params, feats, cfg)[0])


def decode_embedding(emb: Embedding, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> PredictionSet:
    consts = as_values(params, requires_grad=False)
    flat = decode(consts, nk.constant(emb.v[None, :]), cfg).data
    return PredictionSet(emb.sample_id, flat.reshape(cfg.num_hypotheses, cfg.pred_len, 2))


# -- checkpoints --------------------------------------------------------------


def save_model(path, params: Mapping[str, np.ndarray], cfg: ModelConfig, extra: Mapping | None = None) -> None:
    meta = {"model": asdict(cfg)}
    meta.update(extra or {})
    nk.save_params(path, params, meta)


def load_model(path, cfg: ModelConfig | None = None) -> tuple[dict[str, np.ndarray], ModelConfig]:
    params, meta = nk.load_params(path)
    stored = ModelConfig(**meta["model"])
    if cfg is not None and stored != cfg:
        raise ConfigurationError(f"{path}: checkpoint model config {asdict(stored)} differs from requested {asdict(cfg)}")
    check_params(params, stored)
    return params, stored
