"""Synthetic bird's-eye-view driving scenarios with a long-tail maneuver mix.

Each scenario is generated from its own seed stream ``(config.seed, sample_id)``
so any index range can be produced independently and replays are bitwise
identical. Coordinates come out in a random world frame; ``ego_normalize``
moves them into the frame the model consumes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

SCHEMA_VERSION = "tract-scenario/1"

MANEUVERS = ("straight", "curve", "turn", "stop_and_go", "evasive", "u_turn")
TAIL_MANEUVERS = ("stop_and_go", "evasive", "u_turn")

DEFAULT_MIXTURE = {
    "straight": 0.55,
    "curve": 0.15,
    "turn": 0.15,
    "stop_and_go": 0.07,
    "evasive": 0.05,
    "u_turn": 0.03,
}

# corridor construction; SIMPLIFY_TOL must stay below both RECT_MARGIN and the half-width
RECT_MARGIN = 0.5
SIMPLIFY_TOL = 0.25
EXTEND_AHEAD = 20.0
EXTEND_BEHIND = 5.0


@dataclass(frozen=True)
class MixtureConfig:
    probabilities: dict = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    noise_std: float = 0.1
    speed_range: tuple = (4.0, 14.0)
    neighbor_range: tuple = (0, 4)
    seed: int = 7
    obs_len: int = 8
    pred_len: int = 6
    dt: float = 0.5
    half_width: float = 2.0
    n_distractors: int = 2

    def validate(self) -> None:
        probs = self.probabilities
        unknown = set(probs) - set(MANEUVERS)
        if unknown:
            raise ConfigurationError(f"unknown maneuvers in mixture: {sorted(unknown)}")
        values = [float(probs.get(m, 0.0)) for m in MANEUVERS]
        if any(p < 0 or not math.isfinite(p) for p in values):
            raise ConfigurationError(f"mixture probabilities must be non-negative: {probs}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise ConfigurationError(f"mixture probabilities sum to {sum(values)!r}, expected 1")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"speed_range must satisfy 0 < lo <= hi, got {self.speed_range}")
        nlo, nhi = self.neighbor_range
        if not 0 <= nlo <= nhi:
            raise ConfigurationError(f"neighbor_range must satisfy 0 <= lo <= hi, got {self.neighbor_range}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.obs_len < 2 or self.pred_len < 1 or self.dt <= 0:
            raise ConfigurationError("need obs_len >= 2, pred_len >= 1 and dt > 0")
        if self.half_width <= SIMPLIFY_TOL:
            raise ConfigurationError(f"half_width must exceed {SIMPLIFY_TOL}")

    @property
    def max_neighbors(self) -> int:
        return int(self.neighbor_range[1])


@dataclass
class Scenario:
    sample_id: int
    history: np.ndarray  # (L, 2)
    future: np.ndarray  # (T, 2)
    neighbors: np.ndarray  # (N_nb, L, 2), zero padded
    neighbor_mask: np.ndarray  # (N_nb,) bool
    drivable: list  # convex polygons, each (n, 2); the first n_corridor form the corridor
    n_corridor: int
    maneuver_label: str

    def validate(self, obs_len: int | None = None, pred_len: int | None = None) -> None:
        L = self.history.shape[0] if obs_len is None else obs_len
        T = self.future.shape[0] if pred_len is None else pred_len
        if self.history.shape != (L, 2) or self.future.shape != (T, 2):
            raise DataError(f"sample {self.sample_id}: bad history/future shapes {self.history.shape}, {self.future.shape}")
        for name, arr in (("history", self.history), ("future", self.future), ("neighbors", self.neighbors)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"sample {self.sample_id}: non-finite coordinate in {name}")
        steps = np.linalg.norm(np.diff(self.history, axis=0), axis=1)
        jump = float(np.linalg.norm(self.future[0] - self.history[-1]))
        if jump > 1.5 * (steps.max() + 0.5):
            raise DataError(f"sample {self.sample_id}: future[0] breaks kinematic continuity ({jump:.3f} m)")
        if self.maneuver_label not in MANEUVERS:
            raise DataError(f"sample {self.sample_id}: unknown maneuver {self.maneuver_label!r}")


# -- geometry helpers ---------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([1.0, 0.0])


def _simplify(points: np.ndarray, tol: float) -> np.ndarray:
    """Douglas-Peucker polyline simplification (iterative)."""
    keep = np.zeros(len(points), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        a, b = points[i], points[j]
        seg = b - a
        seg_len2 = float(seg @ seg)
        inner = points[i + 1 : j]
        if seg_len2 == 0.0:
            dist = np.linalg.norm(inner - a, axis=1)
        else:
            t = np.clip(((inner - a) @ seg) / seg_len2, 0.0, 1.0)
            dist = np.linalg.norm(inner - (a + t[:, None] * seg), axis=1)
        k = int(np.argmax(dist))
        if dist[k] > tol:
            mid = i + 1 + k
            keep[mid] = True
            stack.append((i, mid))
            stack.append((mid, j))
    return points[keep]


def _dedupe(points: np.ndarray, min_gap: float) -> np.ndarray:
    out = [points[0]]
    for p in points[1:]:
        if np.linalg.norm(p - out[-1]) >= min_gap:
            out.append(p)
    if len(out) == 1:
        out.append(points[-1])
    return np.array(out)


def _rect(p: np.ndarray, q: np.ndarray, half_width: float, margin: float) -> np.ndarray:
    u = _unit(q - p)
    n = np.array([-u[1], u[0]])
    a, b = p - margin * u, q + margin * u
    return np.array([a + half_width * n, b + half_width * n, b - half_width * n, a - half_width * n])


def corridor_centerline(corridor: Sequence[np.ndarray]) -> tuple[np.ndarray, float]:
    """Recover the simplified centerline vertices and half-width from corridor quads."""
    pts = []
    for i, quad in enumerate(corridor):
        quad = np.asarray(quad, dtype=np.float64)
        start = 0.5 * (quad[0] + quad[3])
        end = 0.5 * (quad[1] + quad[2])
        u = _unit(end - start)
        if i == 0:
            pts.append(start + RECT_MARGIN * u)
        pts.append(end - RECT_MARGIN * u)
    half_width = 0.5 * float(np.linalg.norm(np.asarray(corridor[0])[0] - np.asarray(corridor[0])[3]))
    return np.array(pts), half_width


def drivable_for(
    maneuver: str,
    path: np.ndarray,
    half_width: float = 2.0,
    rng: np.random.Generator | None = None,
    n_distractors: int = 2,
) -> tuple[list, int]:
    """Corridor of convex quads covering ``path`` plus optional distractor lots.

    The path is extended straight ahead and behind, simplified with a tolerance
    below the quad margin and the half-width, and one rectangle is laid along
    each simplified segment (collinear paths collapse to a single rectangle).
    U-turns get a corridor 1.5x wider. Returns ``(polygons, n_corridor)``.
    """
    path = np.asarray(path, dtype=np.float64)
    if maneuver == "u_turn":
        half_width *= 1.5
    pts = _dedupe(path, 1e-6)
    head = _unit(pts[-1] - pts[-2])
    tail = _unit(pts[1] - pts[0])
    ext = np.vstack([pts[0] - EXTEND_BEHIND * tail, pts, pts[-1] + EXTEND_AHEAD * head])
    line = _simplify(ext, SIMPLIFY_TOL)
    polys = [_rect(line[i], line[i + 1], half_width, RECT_MARGIN) for i in range(len(line) - 1)]
    n_corridor = len(polys)

    if rng is not None and n_distractors > 0:
        anchor = path[len(path) // 2]
        u = _unit(path[-1] - path[0])
        n = np.array([-u[1], u[0]])
        for _ in range(n_distractors):
            side = 1.0 if rng.random() < 0.5 else -1.0
            centre = anchor + rng.uniform(-10.0, 30.0) * u + side * rng.uniform(9.0, 20.0) * n
            ang = math.atan2(u[1], u[0]) + rng.uniform(-0.3, 0.3)
            du = np.array([math.cos(ang), math.sin(ang)])
            dn = np.array([-du[1], du[0]])
            hl, hw = 0.5 * rng.uniform(4.0, 10.0), 0.5 * rng.uniform(3.0, 8.0)
            polys.append(
                np.array(
                    [
                        centre - hl * du - hw * dn,
                        centre + hl * du - hw * dn,
                        centre + hl * du + hw * dn,
                        centre - hl * du + hw * dn,
                    ]
                )
            )
    return polys, n_corridor


# -- kinematics ---------------------------------------------------------------


def _integrate(speeds: np.ndarray, yaw_rates: np.ndarray, dt: float) -> np.ndarray:
    """Unicycle rollout from the origin heading +x; returns len(speeds) + 1 points."""
    pts = np.zeros((len(speeds) + 1, 2))
    psi = 0.0
    for n, (v, w) in enumerate(zip(speeds, yaw_rates)):
        mid = psi + 0.5 * w * dt
        pts[n + 1] = pts[n] + v * dt * np.array([math.cos(mid), math.sin(mid)])
        psi += w * dt
    return pts


def _heading_at(pts: np.ndarray, idx: int) -> float:
    d = pts[idx] - pts[idx - 1]
    return math.atan2(d[1], d[0])


def _maneuver_profile(label: str, cfg: MixtureConfig, rng: np.random.Generator):
    """Per-transition speed and yaw-rate arrays, plus an optional cue-neighbour description."""
    L, T, dt = cfg.obs_len, cfg.pred_len, cfg.dt
    n = L + T - 1
    fut = np.arange(n) >= L - 1
    lo, hi = cfg.speed_range
    speeds = np.empty(n)
    yaw = np.zeros(n)
    cue = None
    horizon = T * dt

    if label == "straight":
        speeds[:] = rng.uniform(lo, hi)
    elif label == "curve":
        speeds[:] = rng.uniform(lo, hi)
        yaw[:] = rng.choice([-1.0, 1.0]) * rng.uniform(0.08, 0.25)
    elif label == "turn":
        v = rng.uniform(0.6 * lo, 0.6 * hi)
        speeds[:] = v
        speeds[fut] = 0.85 * v
        yaw[fut] = rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 3, math.pi / 2) / horizon
    elif label == "stop_and_go":
        v = rng.uniform(max(lo, 0.5 * (lo + hi)), hi)
        a = rng.uniform(2.5, 4.5)
        k = np.arange(n) - (L - 2)
        speeds[:] = v
        speeds[fut] = np.maximum(v - a * dt * k[fut], 0.0)
        stop_dist = v * v / (2 * a)
        cue = {"ahead": stop_dist + rng.uniform(4.0, 7.0), "lateral": 0.0, "speed": 0.0}
    elif label == "evasive":
        v = rng.uniform(max(lo, 0.5 * (lo + hi)), hi)
        shift = rng.choice([-1.0, 1.0]) * rng.uniform(2.5, 3.5)
        amp = 2 * math.pi * shift / (v * horizon**2)
        phase = (np.arange(n) - (L - 1) + 0.5) / T
        speeds[:] = v
        yaw[fut] = amp * np.sin(2 * math.pi * phase[fut])
        cue = {"ahead": v * rng.uniform(1.5, 2.5), "lateral": 0.0, "speed": rng.uniform(0.0, 2.0)}
    elif label == "u_turn":
        v = rng.uniform(0.35 * lo, 0.35 * hi)
        speeds[:] = v
        yaw[fut] = rng.choice([-1.0, 1.0]) * rng.uniform(0.85, 1.0) * math.pi / horizon
    else:
        raise ConfigurationError(f"unknown maneuver {label!r}")
    return speeds, yaw, cue


def _neighbour_history(cfg: MixtureConfig, rng: np.random.Generator, cue: dict | None) -> np.ndarray:
    """History of one independent mover, in the ego-present local frame."""
    L, dt = cfg.obs_len, cfg.dt
    if cue is not None:
        ahead, lateral, speed, heading = cue["ahead"], cue["lateral"], cue["speed"], 0.0
        yaw_rate = 0.0
    else:
        ahead = rng.uniform(-25.0, 35.0)
        lateral = rng.choice([-1.0, 1.0]) * rng.uniform(3.5, 12.0)
        speed = rng.uniform(0.0, cfg.speed_range[1])
        heading = 0.0 if rng.random() < 0.7 else math.pi
        yaw_rate = 0.0 if rng.random() < 0.7 else rng.choice([-1.0, 1.0]) * rng.uniform(0.05, 0.2)
    local = _integrate(np.full(L - 1, speed), np.full(L - 1, yaw_rate), dt)
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    local = (local - local[-1]) @ rot.T
    return local + np.array([ahead, lateral])


def generate_scenario(cfg: MixtureConfig, sample_id: int) -> Scenario:
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(sample_id)]))
    labels = list(MANEUVERS)
    probs = np.array([float(cfg.probabilities.get(m, 0.0)) for m in labels])
    label = labels[int(rng.choice(len(labels), p=probs / probs.sum()))]
    L, T = cfg.obs_len, cfg.pred_len

    speeds, yaw, cue = _maneuver_profile(label, cfg, rng)
    local = _integrate(speeds, yaw, cfg.dt)
    # ego-present local frame: present at the origin, heading +x
    psi = _heading_at(local, L - 1)
    c, s = math.cos(-psi), math.sin(-psi)
    local = (local - local[L - 1]) @ np.array([[c, -s], [s, c]]).T

    n_nb = int(rng.integers(cfg.neighbor_range[0], cfg.neighbor_range[1] + 1))
    if cue is not None:
        n_nb = max(n_nb, 1)
    n_nb = min(n_nb, cfg.max_neighbors)
    nbs = []
    for j in range(n_nb):
        nbs.append(_neighbour_history(cfg, rng, cue if j == 0 else None))

    theta = rng.uniform(0.0, 2 * math.pi)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    origin = rng.uniform(-200.0, 200.0, size=2)

    def to_world(p):
        return p @ rot.T + origin

    world = to_world(local)
    if cfg.noise_std > 0:
        world = world + rng.normal(0.0, cfg.noise_std, size=world.shape)
    history, future = world[:L], world[L:]

    neighbors = np.zeros((cfg.max_neighbors, L, 2))
    mask = np.zeros(cfg.max_neighbors, dtype=bool)
    for j, nb in enumerate(nbs):
        nbw = to_world(nb)
        if cfg.noise_std > 0:
            nbw = nbw + rng.normal(0.0, cfg.noise_std, size=nbw.shape)
        neighbors[j] = nbw
        mask[j] = True

    polys, n_corridor = drivable_for(label, world, cfg.half_width, rng, cfg.n_distractors)
    scen = Scenario(int(sample_id), history, future, neighbors, mask, polys, n_corridor, label)
    scen.validate(L, T)
    return scen


def generate_dataset(cfg: MixtureConfig, count: int, start: int = 0) -> list[Scenario]:
    """``count`` scenarios with ids ``start .. start + count - 1``."""
    cfg.validate()
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    return [generate_scenario(cfg, i) for i in range(start, start + count)]


# -- frames and baselines -----------------------------------------------------


def ego_transform(history: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and origin mapping world points into the ego frame."""
    origin = history[-1]
    d = history[-1] - history[-2]
    psi = math.atan2(d[1], d[0]) if np.any(d != 0) else 0.0
    c, s = math.cos(-psi), math.sin(-psi)
    return np.array([[c, -s], [s, c]]), origin


def ego_normalize(scen: Scenario) -> Scenario:
    """Place history[L-1] at the origin with the last observed heading along +x."""
    rot, origin = ego_transform(scen.history)

    def f(p):
        return (np.asarray(p) - origin) @ rot.T

    nbs = np.where(scen.neighbor_mask[:, None, None], f(scen.neighbors), 0.0)
    return replace(
        scen,
        history=f(scen.history),
        future=f(scen.future),
        neighbors=nbs,
        drivable=[f(p) for p in scen.drivable],
    )


def constant_velocity(history: np.ndarray, pred_len: int) -> np.ndarray:
    step = history[-1] - history[-2]
    return history[-1] + step * np.arange(1, pred_len + 1)[:, None]


# -- splits and files ---------------------------------------------------------


def split_by_hash(ids: Iterable[int], fractions: Sequence[float], salt: int) -> list[list[int]]:
    """Disjoint id groups ordered by a salted hash; group sizes follow ``fractions``."""
    ids = list(ids)
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ConfigurationError(f"split fractions must be non-negative and sum to <= 1, got {list(fractions)}")
    key = lambda i: hashlib.sha256(f"{salt}:{i}".encode()).hexdigest()  # noqa: E731
    ordered = sorted(ids, key=key)
    n = len(ordered)
    sizes = [int(round(f * n)) for f in fractions]
    if abs(sum(fractions) - 1.0) <= 1e-9:
        sizes[-1] = n - sum(sizes[:-1])
    groups, at = [], 0
    for size in sizes:
        groups.append(sorted(ordered[at : at + size]))
        at += size
    return groups


def scenario_to_json(s: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "sample_id": s.sample_id,
        "maneuver_label": s.maneuver_label,
        "history": s.history.tolist(),
        "future": s.future.tolist(),
        "neighbors": s.neighbors.tolist(),
        "neighbor_mask": s.neighbor_mask.astype(bool).tolist(),
        "drivable": [np.asarray(p).tolist() for p in s.drivable],
        "n_corridor": s.n_corridor,
    }


def scenario_from_json(doc: dict) -> Scenario:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"sample {doc.get('sample_id')}: unsupported schema {doc.get('schema_version')!r}")
    neighbors = np.asarray(doc["neighbors"], dtype=np.float64)
    L = len(doc["history"])
    if neighbors.size == 0:
        neighbors = neighbors.reshape(0, L, 2)
    return Scenario(
        sample_id=int(doc["sample_id"]),
        history=np.asarray(doc["history"], dtype=np.float64),
        future=np.asarray(doc["future"], dtype=np.float64),
        neighbors=neighbors,
        neighbor_mask=np.asarray(doc["neighbor_mask"], dtype=bool),
        drivable=[np.asarray(p, dtype=np.float64) for p in doc["drivable"]],
        n_corridor=int(doc["n_corridor"]),
        maneuver_label=doc["maneuver_label"],
    )


def write_dataset(path, scenarios: Iterable[Scenario]) -> None:
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_json(s)) + "\n")


def read_dataset(path) -> list[Scenario]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(scenario_from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed scenario record ({exc})") from None
    return out
