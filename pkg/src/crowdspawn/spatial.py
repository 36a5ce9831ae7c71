"""Spawn and goal areas, their co-occurrence, and the spawn-conditional GMM.

Trajectory endpoints are clustered with DBSCAN. Every cluster becomes a
Gaussian area with an axis-aligned covariance. Counting which spawn area each
trajectory left from and which goal area it reached gives a frequency matrix;
its normalised rows are the mixture weights over goal areas, one mixture per
spawn area.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import DBSCAN

from .data import OccupancyMap, TrajectoryDataset, split_endpoints
from .errors import ModelLoadFailure, NoClustersFound, OccupiedSampleExhausted, UnusableSpawn

log = logging.getLogger(__name__)

SIGMA_FLOOR = 0.05
MAX_RESAMPLES = 16
NOISE = -1


@dataclass(frozen=True)
class AreaModel:
    area_id: int
    mu: tuple[float, float]
    sigma: tuple[float, float]
    member_count: int

    def to_dict(self) -> dict:
        return {"area_id": self.area_id, "mu": list(self.mu), "sigma": list(self.sigma), "member_count": self.member_count}

    @classmethod
    def from_dict(cls, d: dict) -> AreaModel:
        return cls(int(d["area_id"]), tuple(map(float, d["mu"])), tuple(map(float, d["sigma"])), int(d["member_count"]))


def cluster_areas(points, eps: float, min_samples: int) -> tuple[list[AreaModel], np.ndarray]:
    """DBSCAN over 2-D points; one :class:`AreaModel` per cluster.

    Areas are numbered in ascending (mu_x, mu_y) order so ids do not depend on
    DBSCAN's internal discovery order. Noise points get label ``-1``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if eps <= 0 or min_samples < 1 or len(pts) == 0:
        raise ValueError("need eps > 0, min_samples >= 1 and at least one point")
    raw = DBSCAN(eps=eps, min_samples=min_samples, metric="euclidean").fit_predict(pts)
    cluster_ids = [c for c in np.unique(raw) if c != NOISE]
    if not cluster_ids:
        raise NoClustersFound(f"all {len(pts)} points are noise at eps={eps}, min_samples={min_samples}")
    stats = []
    for c in cluster_ids:
        members = pts[raw == c]
        mu = members.mean(axis=0)
        sigma = np.maximum(members.std(axis=0), SIGMA_FLOOR)
        stats.append((float(mu[0]), float(mu[1]), c, sigma, len(members)))
    stats.sort(key=lambda s: (s[0], s[1]))
    labels = np.full(len(pts), NOISE, dtype=np.int64)
    areas = []
    for new_id, (mx, my, c, sigma, count) in enumerate(stats):
        labels[raw == c] = new_id
        areas.append(AreaModel(new_id, (mx, my), (float(sigma[0]), float(sigma[1])), count))
    return areas, labels


@dataclass(frozen=True)
class SpatialModel:
    spawn_areas: tuple[AreaModel, ...]
    goal_areas: tuple[AreaModel, ...]
    cooccurrence: np.ndarray  # (|S*|, |E*|) int counts
    mixtures: np.ndarray  # (|S*|, |E*|) row-stochastic where usable, zeros otherwise

    @property
    def usable(self) -> np.ndarray:
        return self.cooccurrence.sum(axis=1) > 0

    def usable_spawns(self) -> list[int]:
        return [int(s) for s in np.nonzero(self.usable)[0]]

    def support(self, spawn_id: int) -> list[int]:
        return [int(k) for k in np.nonzero(self.cooccurrence[spawn_id])[0]]

    def goal_density(self, spawn_id: int, points) -> np.ndarray:
        """Analytic mixture density of goal positions for one spawn area."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dens = np.zeros(len(pts))
        for k in self.support(spawn_id):
            area = self.goal_areas[k]
            mu, sd = np.asarray(area.mu), np.asarray(area.sigma)
            z = (pts - mu) / sd
            dens += self.mixtures[spawn_id, k] * np.exp(-0.5 * (z ** 2).sum(axis=1)) / (2 * np.pi * sd[0] * sd[1])
        return dens

    def to_dict(self) -> dict:
        return {
            "format": "crowdspawn-spatial/1",
            "spawn_areas": [a.to_dict() for a in self.spawn_areas],
            "goal_areas": [a.to_dict() for a in self.goal_areas],
            "cooccurrence": self.cooccurrence.tolist(),
            "mixtures": self.mixtures.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SpatialModel:
        if d.get("format") != "crowdspawn-spatial/1":
            raise ModelLoadFailure(f"unknown spatial model format {d.get('format')!r}")
        spawn = tuple(AreaModel.from_dict(a) for a in d["spawn_areas"])
        goal = tuple(AreaModel.from_dict(a) for a in d["goal_areas"])
        co = np.array(d["cooccurrence"], dtype=np.int64).reshape(len(spawn), len(goal))
        mix = np.array(d["mixtures"], dtype=np.float64).reshape(len(spawn), len(goal))
        return cls(spawn, goal, co, mix)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> SpatialModel:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ModelLoadFailure(f"cannot load spatial model {path}: {exc}") from exc


def build_cooccurrence(
    spawn_areas: list[AreaModel],
    goal_areas: list[AreaModel],
    spawn_labels,
    goal_labels,
) -> SpatialModel:
    """Count (spawn, goal) label pairs and normalise each row into mixture weights.

    Pairs where either endpoint is noise are skipped. A spawn area whose
    trajectories all end in noise keeps a zero row and is reported unusable.
    """
    s_lab = np.asarray(spawn_labels, dtype=np.int64)
    g_lab = np.asarray(goal_labels, dtype=np.int64)
    if s_lab.shape != g_lab.shape:
        raise ValueError("spawn and goal labels must align one-to-one with trajectories")
    freq = np.zeros((len(spawn_areas), len(goal_areas)), dtype=np.int64)
    keep = (s_lab != NOISE) & (g_lab != NOISE)
    np.add.at(freq, (s_lab[keep], g_lab[keep]), 1)
    totals = freq.sum(axis=1, keepdims=True)
    mixtures = np.divide(freq, totals, out=np.zeros(freq.shape, dtype=np.float64), where=totals > 0)
    for s in np.nonzero(totals[:, 0] == 0)[0]:
        log.warning("spawn area %d has empty goal support; marked unusable", s)
    return SpatialModel(tuple(spawn_areas), tuple(goal_areas), freq, mixtures)


def fit_spatial(
    dataset: TrajectoryDataset,
    eps: float,
    min_samples: int,
) -> tuple[SpatialModel, np.ndarray, np.ndarray]:
    """Cluster both endpoint sets and build the model. Also returns the per-trajectory labels."""
    starts, ends = split_endpoints(dataset)
    spawn_areas, s_lab = cluster_areas(starts, eps, min_samples)
    goal_areas, g_lab = cluster_areas(ends, eps, min_samples)
    return build_cooccurrence(spawn_areas, goal_areas, s_lab, g_lab), s_lab, g_lab


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_spawn_goals(
    model: SpatialModel,
    spawn_id: int,
    n: int,
    rng,
    occupancy: OccupancyMap | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``n`` (spawn position, goal position, goal id) triples for one spawn area."""
    rng = _rng(rng)
    if not (0 <= spawn_id < len(model.spawn_areas)):
        raise UnusableSpawn(f"spawn id {spawn_id} out of range")
    if not model.usable[spawn_id]:
        raise UnusableSpawn(f"spawn area {spawn_id} has no goal support")
    s_area = model.spawn_areas[spawn_id]
    g_mu = np.array([a.mu for a in model.goal_areas])
    g_sd = np.array([a.sigma for a in model.goal_areas])
    weights = model.mixtures[spawn_id]

    def draw(m: int):
        xs = rng.normal(s_area.mu, s_area.sigma, size=(m, 2))
        k = rng.choice(len(weights), size=m, p=weights)
        xe = g_mu[k] + g_sd[k] * rng.standard_normal((m, 2))
        return xs, xe, k

    xs, xe, goal = draw(n)
    if occupancy is not None:
        for attempt in range(MAX_RESAMPLES + 1):
            bad = occupancy.occupied(xs) | occupancy.occupied(xe)
            if not bad.any():
                break
            if attempt == MAX_RESAMPLES:
                raise OccupiedSampleExhausted(
                    f"spawn area {spawn_id}: no free spawn/goal pair after {MAX_RESAMPLES} resamples"
                )
            xs[bad], xe[bad], goal[bad] = draw(int(bad.sum()))
    return xs, xe, goal.astype(np.int64)


def sample_spawn_goal(
    model: SpatialModel,
    spawn_id: int,
    rng,
    occupancy: OccupancyMap | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    xs, xe, k = sample_spawn_goals(model, spawn_id, 1, rng, occupancy)
    return xs[0], xe[0], int(k[0])
