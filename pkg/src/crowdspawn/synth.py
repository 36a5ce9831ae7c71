"""Synthetic scenes with planted spawn processes and routing.

Agents walk in straight lines at constant speed from a Gaussian spawn point to
a Gaussian goal point. Spawn times come from one of three processes:
homogeneous Poisson, Weibull renewal (bursty for shape < 1), or a Poisson
process whose rate alternates between two values. The ground truth goes into a
JSON sidecar next to the frame table.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from .data import Trajectory, TrajectoryDataset, make_dataset, write_trajectories
from .seeding import derive_rng

SCENES: dict[str, dict] = {
    "poisson": {
        "horizon": 20000,
        "speed": 0.5,
        "spawns": [
            {
                "mu": [0.0, 10.0], "sigma": [0.3, 0.3],
                "process": {"kind": "poisson", "rate": 0.05},
                "routes": [
                    {"mu": [20.0, 16.0], "sigma": [0.3, 0.3], "weight": 0.6},
                    {"mu": [20.0, 4.0], "sigma": [0.3, 0.3], "weight": 0.4},
                ],
            },
            {
                "mu": [10.0, 0.0], "sigma": [0.3, 0.3],
                "process": {"kind": "poisson", "rate": 0.02},
                "routes": [{"mu": [10.0, 20.0], "sigma": [0.3, 0.3], "weight": 1.0}],
            },
        ],
    },
    "bursty": {
        "horizon": 20000,
        "speed": 0.5,
        "spawns": [
            {
                "mu": [0.0, 10.0], "sigma": [0.3, 0.3],
                "process": {"kind": "weibull", "shape": 0.5, "scale": 10.0},
                "routes": [{"mu": [20.0, 10.0], "sigma": [0.3, 0.3], "weight": 1.0}],
            }
        ],
    },
    "alternating": {
        "horizon": 20000,
        "speed": 0.5,
        "spawns": [
            {
                "mu": [0.0, 10.0], "sigma": [0.3, 0.3],
                "process": {"kind": "alternating", "rates": [0.01, 0.1], "period": 500},
                "routes": [{"mu": [20.0, 10.0], "sigma": [0.3, 0.3], "weight": 1.0}],
            }
        ],
    },
    "two-route": {
        "horizon": 20000,
        "speed": 0.5,
        "spawns": [
            {
                "mu": [0.0, 10.0], "sigma": [0.3, 0.3],
                "process": {"kind": "count", "n": 1000},
                "routes": [
                    {"mu": [20.0, 16.0], "sigma": [0.3, 0.3], "weight": 0.6},
                    {"mu": [20.0, 4.0], "sigma": [0.3, 0.3], "weight": 0.4},
                ],
            }
        ],
    },
}


def spawn_times(process: dict, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Event times in ``[0, horizon)`` for one planted process description."""
    kind = process["kind"]
    if kind == "poisson":
        return _renewal(lambda n: rng.exponential(1.0 / process["rate"], n), horizon)
    if kind == "weibull":
        k, lam = process["shape"], process["scale"]
        return _renewal(lambda n: lam * rng.weibull(k, n), horizon)
    if kind == "alternating":
        lo, hi = process["rates"]
        period = process["period"]
        peak = max(lo, hi)
        cand = _renewal(lambda n: rng.exponential(1.0 / peak, n), horizon)
        rate = np.where((cand // period) % 2 == 0, lo, hi)
        return cand[rng.random(len(cand)) < rate / peak]
    if kind == "count":
        return np.sort(rng.uniform(0, horizon, int(process["n"])))
    raise ValueError(f"unknown process kind {kind!r}")


def _renewal(draw, horizon: float) -> np.ndarray:
    out = []
    t = 0.0
    while True:
        gaps = draw(1024)
        ts = t + np.cumsum(gaps)
        out.append(ts[ts < horizon])
        if ts[-1] >= horizon:
            break
        t = ts[-1]
    return np.concatenate(out)


def straight_path(start, goal, speed: float) -> np.ndarray:
    """Positions one frame apart at ``speed`` m/frame, ending exactly on ``goal``."""
    start, goal = np.asarray(start, float), np.asarray(goal, float)
    n = max(1, int(math.ceil(np.linalg.norm(goal - start) / speed)))
    frac = np.arange(n + 1)[:, None] / n
    return start + frac * (goal - start)


def generate_scene(scene: str | dict, seed: int = 0, horizon: float | None = None) -> tuple[TrajectoryDataset, dict]:
    """Build a dataset and its ground-truth sidecar document."""
    spec = copy.deepcopy(SCENES[scene] if isinstance(scene, str) else scene)
    if horizon is not None:
        spec["horizon"] = horizon
    H = float(spec["horizon"])
    speed = float(spec["speed"])
    agents = []
    truth = []
    for s, sp in enumerate(spec["spawns"]):
        rng = derive_rng(seed, "synth", s)
        times = spawn_times(sp["process"], H, rng)
        frames = np.floor(times).astype(np.int64)
        weights = np.array([r["weight"] for r in sp["routes"]], dtype=float)
        weights = weights / weights.sum()
        route = rng.choice(len(weights), size=len(frames), p=weights)
        starts = rng.normal(sp["mu"], sp["sigma"], size=(len(frames), 2))
        for f, k, x0 in zip(frames, route, starts):
            r = sp["routes"][k]
            goal = rng.normal(r["mu"], r["sigma"])
            agents.append((int(f), s, int(k), straight_path(x0, goal, speed)))
        truth.append({"spawn_index": s, "events": int(len(frames)), "process": sp["process"],
                      "weights": weights.tolist()})
    agents.sort(key=lambda a: (a[0], a[1]))
    trajs = [Trajectory(i, f, path) for i, (f, _, _, path) in enumerate(agents)]
    dataset = make_dataset(trajs, name=scene if isinstance(scene, str) else "custom")
    sidecar = {"scene": scene if isinstance(scene, str) else "custom", "seed": seed, "spec": spec,
               "planted": truth, "agents": len(trajs),
               "spawn_index": [a[1] for a in agents], "route_index": [a[2] for a in agents]}
    return dataset, sidecar


def write_scene(path: str | Path, dataset: TrajectoryDataset, sidecar: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(path, dataset.trajectories)
    side = path.with_suffix(".truth.json")
    side.write_text(json.dumps(sidecar, indent=1) + "\n")
    return side
