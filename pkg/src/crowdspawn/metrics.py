"""Crowd statistics, distribution distances, flow bundles and the hyperparameter grid."""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Trajectory, TrajectoryDataset, write_trajectories
from .errors import EmptySample
from .orchestrator import EXITED, TIMED_OUT, AgentRecord, SimulationLog, replay_log, simulate
from .policy import PolicySpec
from .seeding import derive_int, derive_rng
from .spatial import SpatialModel, sample_spawn_goals
from .temporal import (
    NTPPModel,
    SpawnSequence,
    extract_spawn_sequences,
    fit_poisson,
    sample_poisson,
    sample_rollout,
    train_ntpp,
)

log = logging.getLogger(__name__)

BIN_SIZE = 10


@dataclass
class CrowdStats:
    agents_per_frame: np.ndarray
    inter_spawn_times: np.ndarray
    spawns_per_window: np.ndarray
    time_in_scene: np.ndarray
    per_spawn_inter_spawn: dict[int, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "agents_per_frame": self.agents_per_frame.tolist(),
            "inter_spawn_times": self.inter_spawn_times.tolist(),
            "spawns_per_window": self.spawns_per_window.tolist(),
            "time_in_scene": self.time_in_scene.tolist(),
            "per_spawn_inter_spawn": {str(k): v.tolist() for k, v in sorted(self.per_spawn_inter_spawn.items())},
        }


def stats_from_intervals(
    spawn_times,
    enter,
    exit_,
    length: int | None = None,
    spawn_ids=None,
    bin_size: int = BIN_SIZE,
) -> CrowdStats:
    """Statistics from per-agent spawn times and presence intervals ``[enter, exit)``."""
    spawn_times = np.asarray(spawn_times, dtype=np.float64)
    enter = np.asarray(enter, dtype=np.int64)
    exit_ = np.asarray(exit_, dtype=np.int64)
    if len(spawn_times) == 0 and length is None:
        raise EmptySample("no agents and no length given")
    if length is None:
        length = int(exit_.max()) if len(exit_) else 0
    occ = np.zeros(length + 1, dtype=np.int64)
    lo = np.clip(enter, 0, length)
    hi = np.clip(exit_, 0, length)
    np.add.at(occ, lo, 1)
    np.add.at(occ, hi, -1)
    per_frame = np.cumsum(occ)[:length]

    order = np.sort(spawn_times)
    inter = np.diff(order)
    n_bins = int(math.ceil(length / bin_size))
    if len(spawn_times):
        bins = np.bincount((spawn_times // bin_size).astype(np.int64), minlength=n_bins)
    else:
        bins = np.zeros(n_bins, dtype=np.int64)

    per_spawn = {}
    if spawn_ids is not None:
        ids = np.asarray(spawn_ids)
        for s in np.unique(ids):
            if s < 0:
                continue
            per_spawn[int(s)] = np.diff(np.sort(spawn_times[ids == s]))
    return CrowdStats(per_frame, inter, bins, (exit_ - enter).astype(np.float64), per_spawn)


def compute_stats(source, length: int | None = None, bin_size: int = BIN_SIZE, spawn_labels=None) -> CrowdStats:
    """Statistics for a :class:`SimulationLog` or a :class:`TrajectoryDataset`.

    A dataset is first expressed as a replay log, so both inputs go through
    the same code path. Agents never activated are skipped.
    """
    if isinstance(source, TrajectoryDataset):
        source = replay_log(source, spawn_labels)
        length = source.length if length is None else length
    if not isinstance(source, SimulationLog):
        raise TypeError(f"cannot compute stats for {type(source).__name__}")
    done = [r for r in source.records if r.enter_frame is not None]
    if not done and not len(source.counts):
        raise EmptySample("log has no frames")
    if length is None:
        length = source.final_frame + 1
    final = source.final_frame + 1
    return stats_from_intervals(
        [r.spawn_time for r in done],
        [r.enter_frame for r in done],
        [r.exit_time if r.exit_time is not None else final for r in done],
        length,
        [r.spawn_id for r in done],
        bin_size,
    )


def ks_distance(sample_a, sample_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: largest gap between the empirical CDFs."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(sample_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptySample("KS distance needs two nonempty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "mean": None, "two_std": None, "min": None, "max": None}
    return {"n": int(v.size), "mean": float(v.mean()), "two_std": float(2 * v.std()),
            "min": float(v.min()), "max": float(v.max())}


# -- flows ---------------------------------------------------------------------


def hausdorff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def mean_path(paths: Sequence[np.ndarray], n_points: int = 50) -> np.ndarray:
    """Average of paths after resampling each to ``n_points`` by arc length."""
    out = []
    for p in paths:
        p = np.asarray(p, dtype=np.float64)
        seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        if s[-1] == 0:
            out.append(np.repeat(p[:1], n_points, axis=0))
            continue
        q = np.linspace(0, s[-1], n_points)
        out.append(np.column_stack([np.interp(q, s, p[:, 0]), np.interp(q, s, p[:, 1])]))
    return np.mean(out, axis=0)


def flow_bundles(log: SimulationLog) -> dict[tuple[int, int], list[AgentRecord]]:
    bundles: dict[tuple[int, int], list[AgentRecord]] = {}
    for r in log.records:
        if r.state in (EXITED, TIMED_OUT) and r.path:
            bundles.setdefault((r.spawn_id, r.goal_id), []).append(r)
    return dict(sorted(bundles.items()))


def flow_export(log: SimulationLog, spatial: SpatialModel | None, directory: str | Path) -> dict:
    """One frame-table file per (spawn, goal) pair plus an ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for (s, g), recs in flow_bundles(log).items():
        name = f"flow_s{s}_g{g}.csv"
        trajs = [Trajectory(r.agent_id, int(r.enter_frame), np.array(r.path)) for r in recs]
        write_trajectories(directory / name, trajs)
        entry = {"spawn_id": s, "goal_id": g, "file": name, "paths": len(recs)}
        if spatial is not None and 0 <= s < len(spatial.spawn_areas) and 0 <= g < len(spatial.goal_areas):
            entry["spawn_mu"] = list(spatial.spawn_areas[s].mu)
            entry["goal_mu"] = list(spatial.goal_areas[g].mu)
        index.append(entry)
    doc = {"bundles": index, "total_paths": sum(e["paths"] for e in index)}
    (directory / "index.json").write_text(json.dumps(doc, indent=1) + "\n")
    return doc


# -- hyperparameter grid ---------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    windows: tuple[int, ...] = (100, 500, 1000)
    overlaps: tuple[int, ...] = (5, 50)
    n_rollouts: tuple[int, ...] = (1, 10)
    rollout_lengths: tuple[int, ...] = (1000, 10000)
    total_length: int = 10000
    samples: int = 5

    def cells(self) -> list[tuple[int, int, int, int]]:
        return list(itertools.product(self.windows, self.overlaps, self.n_rollouts, self.rollout_lengths))


def rollout_to_total(model: NTPPModel, total: int, n_rollouts: int, rollout_length: int, rng) -> SpawnSequence:
    """Concatenate independent rollouts of ``rollout_length`` frames until ``total`` frames are covered.

    Rollouts are drawn ``n_rollouts`` at a time; the joined sequence is cut at
    ``total``.
    """
    times = []
    offset = 0
    while offset < total:
        batch = sample_rollout(model, n_rollouts * rollout_length, n_rollouts, rng)
        times.append(batch.times + offset)
        offset += n_rollouts * rollout_length
    t = np.concatenate(times)
    return SpawnSequence(model.spawn_id, t[t < total], float(total))


def _agents_from_sequences(spatial: SpatialModel, seqs: dict[int, SpawnSequence], rng) -> list[AgentRecord]:
    events = []
    for s in sorted(seqs):
        seq = seqs[s]
        if seq.empty:
            continue
        xs, xe, g = sample_spawn_goals(spatial, s, len(seq), rng)
        events += [(float(t), s, xs[i], xe[i], int(g[i])) for i, t in enumerate(seq.times)]
    events.sort(key=lambda e: (e[0], e[1]))
    return [AgentRecord(i, s, g, t, xs, xe) for i, (t, s, xs, xe, g) in enumerate(events)]


def _simulate_counts(spatial, seqs, policy, total, seed, sim_kwargs) -> np.ndarray:
    agents = _agents_from_sequences(spatial, seqs, derive_rng(seed, "space"))
    log_ = simulate(agents, policy, total, record_paths=False, seed=derive_int(seed, "policy"), **sim_kwargs)
    return log_.agents_per_frame()[:total]


@dataclass
class AblationReport:
    grid: AblationGrid
    cells: dict[tuple[int, int, int, int], dict]
    ground_truth: dict
    poisson: dict
    direction: dict

    def to_dict(self) -> dict:
        return {
            "grid": {
                "windows": list(self.grid.windows), "overlaps": list(self.grid.overlaps),
                "n_rollouts": list(self.grid.n_rollouts), "rollout_lengths": list(self.grid.rollout_lengths),
                "total_length": self.grid.total_length, "samples": self.grid.samples,
            },
            "cells": [
                {"w": w, "o": o, "nRo": n, "lRo": l, **cell}
                for (w, o, n, l), cell in sorted(self.cells.items())
            ],
            "ground_truth": self.ground_truth,
            "poisson_gmm": self.poisson,
            "direction": self.direction,
        }


def _train_cell_models(args):
    seqs, w, o, seed, train_kwargs, cache = args
    models = {}
    for seq in seqs:
        path = None if cache is None else Path(cache) / f"ntpp_w{w}_o{o}_s{seq.spawn_id}.json"
        if path is not None and path.exists():
            models[seq.spawn_id] = NTPPModel.load(path)
            continue
        m = train_ntpp(seq, w, o, seed=derive_int(seed, "train", w, o), **train_kwargs)
        if path is not None:
            m.save(path)
        models[seq.spawn_id] = m
    return (w, o), models


def run_ablation(
    dataset: TrajectoryDataset,
    spatial: SpatialModel,
    spawn_labels,
    grid: AblationGrid = AblationGrid(),
    seed: int = 0,
    policy: PolicySpec | None = None,
    train_kwargs: dict | None = None,
    sim_kwargs: dict | None = None,
    cache_dir: str | Path | None = None,
    jobs: int = 1,
) -> AblationReport:
    """Train one model per (window, overlap) and spawn, sample every cell ``grid.samples`` times.

    Each sample is simulated for ``grid.total_length`` frames and summarised
    by its agents-per-frame distribution. Trained models and finished cells
    are cached under ``cache_dir`` so an interrupted grid resumes where it
    stopped.
    """
    train_kwargs = dict(train_kwargs or {})
    sim_kwargs = dict(sim_kwargs or {})
    policy = policy or PolicySpec("scripted", v_max=1.0)
    total = grid.total_length
    seqs = [s for s in extract_spawn_sequences(dataset, spatial, spawn_labels) if not s.empty]
    if not seqs:
        raise ValueError("dataset has no usable spawn with events")
    cache = None if cache_dir is None else Path(cache_dir)
    if cache is not None:
        (cache / "models").mkdir(parents=True, exist_ok=True)
        (cache / "cells").mkdir(parents=True, exist_ok=True)
    model_cache = None if cache is None else cache / "models"

    pairs = list(itertools.product(grid.windows, grid.overlaps))
    jobs_args = [(seqs, w, o, seed, train_kwargs, model_cache) for w, o in pairs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trained = dict(pool.map(_train_cell_models, jobs_args))
    else:
        trained = dict(map(_train_cell_models, jobs_args))

    gt_log = replay_log(dataset)
    gt_counts = gt_log.agents_per_frame()[: min(total, len(gt_log.counts))]
    poisson_models = {s.spawn_id: fit_poisson(s) for s in seqs}
    poisson_samples = []
    for j in range(grid.samples):
        sseed = derive_int(seed, "poisson-sample", j)
        seqs_j = {s: sample_poisson(m, total, derive_rng(sseed, "time", s)) for s, m in poisson_models.items()}
        poisson_samples.append(_simulate_counts(spatial, seqs_j, policy, total, sseed, sim_kwargs))
    poisson_pool = np.concatenate(poisson_samples)

    cells = {}
    for cell in grid.cells():
        w, o, n_ro, l_ro = cell
        cell_path = None if cache is None else cache / "cells" / f"cell_w{w}_o{o}_n{n_ro}_l{l_ro}.json"
        if cell_path is not None and cell_path.exists():
            cells[cell] = json.loads(cell_path.read_text())
            continue
        samples = []
        for j in range(grid.samples):
            sseed = derive_int(seed, "cell", w, o, n_ro, l_ro, j)
            seqs_j = {
                s: rollout_to_total(m, total, n_ro, l_ro, derive_rng(sseed, "time", s))
                for s, m in trained[(w, o)].items()
            }
            counts = _simulate_counts(spatial, seqs_j, policy, total, sseed, sim_kwargs)
            samples.append(
                {
                    "agents_per_frame": summarize(counts),
                    "spawns": int(sum(len(q) for q in seqs_j.values())),
                    "ks_vs_gt": ks_distance(counts, gt_counts),
                    "ks_vs_poisson": ks_distance(counts, poisson_pool),
                    "histogram": np.bincount(counts).tolist(),
                }
            )
        record = {
            "samples": samples,
            "mean_agents": float(np.mean([s["agents_per_frame"]["mean"] for s in samples])),
            "two_std_agents": float(np.mean([s["agents_per_frame"]["two_std"] for s in samples])),
            "mean_ks_vs_gt": float(np.mean([s["ks_vs_gt"] for s in samples])),
            "mean_ks_vs_poisson": float(np.mean([s["ks_vs_poisson"] for s in samples])),
        }
        if cell_path is not None:
            cell_path.write_text(json.dumps(record, indent=1) + "\n")
        cells[cell] = record

    direction = _direction(cells, grid)
    return AblationReport(
        grid,
        cells,
        {"agents_per_frame": summarize(gt_counts), "histogram": np.bincount(gt_counts).tolist()},
        {
            "rates": {str(s): m.rate for s, m in poisson_models.items()},
            "samples": [summarize(c) for c in poisson_samples],
            "ks_vs_gt": [ks_distance(c, gt_counts) for c in poisson_samples],
        },
        direction,
    )


def _direction(cells: dict, grid: AblationGrid) -> dict:
    """Per sample index: is the shortest window closer to Poisson-GMM than the longest?"""
    short, long_ = min(grid.windows), max(grid.windows)
    votes = []
    for j in range(grid.samples):
        ks_short = np.mean([c["samples"][j]["ks_vs_poisson"] for k, c in cells.items() if k[0] == short])
        ks_long = np.mean([c["samples"][j]["ks_vs_poisson"] for k, c in cells.items() if k[0] == long_])
        votes.append({"sample": j, "ks_short": float(ks_short), "ks_long": float(ks_long),
                      "short_closer": bool(ks_short < ks_long)})
    n_yes = sum(v["short_closer"] for v in votes)
    return {
        "short_window": short,
        "long_window": long_,
        "per_sample": votes,
        "short_closer_count": n_yes,
        "holds": bool(n_yes > len(votes) / 2),
    }
