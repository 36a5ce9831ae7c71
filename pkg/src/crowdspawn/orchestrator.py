"""Discrete-time crowd simulation driven by per-spawn spawn models.

Each frame the clock advances by one; active agents take one policy step;
agents inside ``goal_radius`` of their goal leave; agents older than
``max_lifetime`` are removed as timed out; finally every pending agent whose
spawn time has been reached appears at its spawn position. Agents are
processed in ascending id order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import OccupancyMap, TrajectoryDataset
from .errors import InvariantViolation
from .policy import PolicySpec
from .seeding import derive_int, derive_rng
from .spatial import SpatialModel
from .temporal import NTPPModel, PoissonModel, sample_ntpp_gmm

GOAL_RADIUS = 0.5
MAX_LIFETIME = 5000
RAY_RANGE = 5.0

PENDING, ACTIVE, EXITED, TIMED_OUT = "pending", "active", "exited", "timed_out"


@dataclass
class AgentRecord:
    agent_id: int
    spawn_id: int
    goal_id: int
    spawn_time: float
    spawn_pos: np.ndarray
    goal_pos: np.ndarray
    state: str = PENDING
    enter_frame: int | None = None
    exit_time: int | None = None
    path: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "spawn_id": self.spawn_id,
            "goal_id": self.goal_id,
            "spawn_time": self.spawn_time,
            "enter_frame": self.enter_frame,
            "exit_time": self.exit_time,
            "state": self.state,
            "spawn_pos": [float(v) for v in self.spawn_pos],
            "goal_pos": [float(v) for v in self.goal_pos],
        }


def schedule(
    spatial: SpatialModel,
    temporals: Mapping[int, NTPPModel | PoissonModel],
    length: float,
    n_rollouts: int = 1,
    seed: int = 0,
    occupancy: OccupancyMap | None = None,
) -> list[AgentRecord]:
    """Merge every spawn's sampled agents into one time-ordered pending queue.

    Ties on spawn time are broken by spawn id. Agent ids follow queue order.
    """
    events = []
    for s in sorted(temporals):
        events.extend(sample_ntpp_gmm(temporals[s], spatial, length, n_rollouts, seed, occupancy))
    events.sort(key=lambda e: (e.time, e.spawn_id))
    return [
        AgentRecord(i, e.spawn_id, e.goal_id, e.time, np.array(e.spawn_pos), np.array(e.goal_pos))
        for i, e in enumerate(events)
    ]


@dataclass
class SimulationState:
    pending: list[AgentRecord]
    goal_radius: float = GOAL_RADIUS
    max_lifetime: int = MAX_LIFETIME
    record_paths: bool = True
    action_noise: float = 0.0
    seed: int = 0
    clock: int = -1
    active: list[AgentRecord] = field(default_factory=list)
    completed: list[AgentRecord] = field(default_factory=list)
    pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    vel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    spawned_total: int = 0
    exited_total: int = 0
    timed_out_total: int = 0
    counts: list = field(default_factory=list)  # (frame, spawned, active, exited, timed_out)
    rows: list = field(default_factory=list)  # (frame, agent_id, x, y, state)
    _next: int = 0
    _noise_rng: np.random.Generator | None = None

    def __post_init__(self) -> None:
        self.pending = sorted(self.pending, key=lambda a: (a.spawn_time, a.agent_id))
        self._noise_rng = derive_rng(self.seed, "policy-noise")

    @property
    def n_pending(self) -> int:
        return len(self.pending) - self._next

    def check_conservation(self) -> None:
        if self.spawned_total != len(self.active) + self.exited_total + self.timed_out_total:
            raise InvariantViolation(
                f"frame {self.clock}: spawned {self.spawned_total} != active {len(self.active)} "
                f"+ exited {self.exited_total} + timed out {self.timed_out_total}"
            )


def _observations(state: SimulationState, policy: PolicySpec, occupancy: OccupancyMap | None) -> np.ndarray:
    goals = np.array([a.goal_pos for a in state.active])
    obs = np.hstack([goals - state.pos, state.vel])
    if policy.n_rays:
        if occupancy is None:
            rays = np.full((len(obs), policy.n_rays), np.inf)
        else:
            rays = occupancy.raycast(state.pos, policy.n_rays, RAY_RANGE)
        obs = np.hstack([obs, rays])
    return obs


def step(state: SimulationState, policy: PolicySpec, occupancy: OccupancyMap | None = None) -> SimulationState:
    """Advance one frame in place and return the state."""
    state.clock += 1
    frame = state.clock

    if state.active:
        actions = policy.act(_observations(state, policy, occupancy))
        if state.action_noise > 0:
            actions = actions + state._noise_rng.normal(0.0, state.action_noise, actions.shape)
            norms = np.linalg.norm(actions, axis=1, keepdims=True)
            actions *= np.minimum(1.0, policy.v_max / np.maximum(norms, 1e-300))
        state.pos = state.pos + actions
        state.vel = actions
        goals = np.array([a.goal_pos for a in state.active])
        reached = np.linalg.norm(goals - state.pos, axis=1) <= state.goal_radius
        enter = np.array([a.enter_frame for a in state.active])
        expired = ~reached & (frame - enter > state.max_lifetime)
        keep = ~(reached | expired)
        for i, agent in enumerate(state.active):
            if state.record_paths:
                agent.path.append((float(state.pos[i, 0]), float(state.pos[i, 1])))
            if keep[i]:
                continue
            agent.exit_time = frame
            agent.state = EXITED if reached[i] else TIMED_OUT
            state.completed.append(agent)
            if reached[i]:
                state.exited_total += 1
            else:
                state.timed_out_total += 1
        if state.record_paths:
            for i, agent in enumerate(state.active):
                x, y = agent.path[-1]
                state.rows.append((frame, agent.agent_id, x, y, agent.state))
        if not keep.all():
            state.active = [a for a, k in zip(state.active, keep) if k]
            state.pos = state.pos[keep]
            state.vel = state.vel[keep]

    new = []
    while state._next < len(state.pending) and state.pending[state._next].spawn_time <= frame:
        agent = state.pending[state._next]
        state._next += 1
        agent.state = ACTIVE
        agent.enter_frame = frame
        if state.record_paths:
            agent.path.append((float(agent.spawn_pos[0]), float(agent.spawn_pos[1])))
            state.rows.append((frame, agent.agent_id, float(agent.spawn_pos[0]), float(agent.spawn_pos[1]), ACTIVE))
        new.append(agent)
    if new:
        state.active.extend(new)
        state.pos = np.vstack([state.pos, [a.spawn_pos for a in new]])
        state.vel = np.vstack([state.vel, np.zeros((len(new), 2))])
        state.spawned_total += len(new)

    state.counts.append((frame, state.spawned_total, len(state.active), state.exited_total, state.timed_out_total))
    state.check_conservation()
    return state


@dataclass
class SimulationLog:
    length: int
    records: list[AgentRecord]
    counts: np.ndarray  # (frames, 5): frame, spawned, active, exited, timed_out
    rows: list

    @property
    def final_frame(self) -> int:
        return int(self.counts[-1, 0]) if len(self.counts) else -1

    def agents_per_frame(self) -> np.ndarray:
        return self.counts[:, 2].copy()

    def summary(self) -> dict:
        states = [r.state for r in self.records]
        return {
            "length": self.length,
            "final_frame": self.final_frame,
            "agents": len(self.records),
            "exited": states.count(EXITED),
            "timed_out": states.count(TIMED_OUT),
            "never_spawned": states.count(PENDING),
            "records": [r.summary() for r in self.records],
            "counts": {
                "frame": self.counts[:, 0].astype(int).tolist(),
                "spawned": self.counts[:, 1].astype(int).tolist(),
                "active": self.counts[:, 2].astype(int).tolist(),
                "exited": self.counts[:, 3].astype(int).tolist(),
                "timed_out": self.counts[:, 4].astype(int).tolist(),
            },
        }

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = ["frame,agent_id,x,y,state"]
        lines += [f"{f},{a},{x!r},{y!r},{s}" for f, a, x, y, s in self.rows]
        (directory / "log.csv").write_text("\n".join(lines) + "\n")
        (directory / "summary.json").write_text(json.dumps(self.summary(), indent=1) + "\n")


def check_log(log: SimulationLog) -> list[str]:
    """Invariant checks over a finished run; returns human-readable failures."""
    problems = []
    c = log.counts
    if len(c) and np.any(c[:, 1] != c[:, 2] + c[:, 3] + c[:, 4]):
        problems.append("conservation violated: spawned != active + exited + timed_out")
    if len(c) and np.any(np.diff(c[:, 0]) != 1):
        problems.append("clock is not strictly advancing by one frame")
    seen = {}
    for r in log.records:
        seen[r.agent_id] = seen.get(r.agent_id, 0) + 1
        if r.enter_frame is not None and r.enter_frame < r.spawn_time:
            problems.append(f"agent {r.agent_id} active before its spawn time")
        if r.spawn_time <= log.final_frame and r.state not in (EXITED, TIMED_OUT):
            problems.append(f"agent {r.agent_id} never completed (state {r.state})")
        if r.exit_time is not None and r.exit_time < r.enter_frame:
            problems.append(f"agent {r.agent_id} exits before entering")
    if any(v != 1 for v in seen.values()):
        problems.append("duplicate agent ids in log")
    return problems


def simulate(
    agents: list[AgentRecord],
    policy: PolicySpec,
    length: int,
    occupancy: OccupancyMap | None = None,
    goal_radius: float = GOAL_RADIUS,
    max_lifetime: int = MAX_LIFETIME,
    record_paths: bool = True,
    action_noise: float = 0.0,
    seed: int = 0,
) -> SimulationLog:
    """Step until the clock reaches ``length`` and nothing is left active or pending.

    The hard cap is ``length + max_lifetime + 1`` frames, enough for the last
    spawned agent to time out.
    """
    state = SimulationState(list(agents), goal_radius, max_lifetime, record_paths, action_noise, seed)
    cap = int(length) + int(max_lifetime) + 1
    while state.clock < cap:
        if state.clock >= length - 1 and not state.active and state.n_pending == 0:
            break
        step(state, policy, occupancy)
    records = sorted(state.completed + state.active + state.pending[state._next :], key=lambda a: a.agent_id)
    counts = np.array(state.counts, dtype=np.int64).reshape(-1, 5)
    return SimulationLog(int(length), records, counts, state.rows)


def run(
    spatial: SpatialModel,
    temporals: Mapping[int, NTPPModel | PoissonModel],
    policy: PolicySpec,
    length: int,
    n_rollouts: int = 1,
    seed: int = 0,
    occupancy: OccupancyMap | None = None,
    goal_radius: float = GOAL_RADIUS,
    max_lifetime: int = MAX_LIFETIME,
    record_paths: bool = True,
    action_noise: float = 0.0,
) -> SimulationLog:
    """Schedule agents from the spawn models and simulate them.

    Scheduling and policy noise draw from separate seeds derived from ``seed``.
    """
    agents = schedule(spatial, temporals, length, n_rollouts, derive_int(seed, "schedule"), occupancy)
    agents = [a for a in agents if a.spawn_time < length]
    return simulate(agents, policy, length, occupancy, goal_radius, max_lifetime, record_paths,
                    action_noise, derive_int(seed, "policy"))


def replay_log(dataset: TrajectoryDataset, spawn_labels=None, goal_labels=None) -> SimulationLog:
    """Express a dataset as a simulation log: each trajectory becomes one exited agent."""
    records = []
    rows = []
    n = len(dataset.trajectories)
    s_lab = np.full(n, -1) if spawn_labels is None else np.asarray(spawn_labels)
    g_lab = np.full(n, -1) if goal_labels is None else np.asarray(goal_labels)
    for i, tr in enumerate(dataset.trajectories):
        rec = AgentRecord(
            tr.agent_id, int(s_lab[i]), int(g_lab[i]), float(tr.start_frame),
            tr.positions[0].copy(), tr.positions[-1].copy(), EXITED, tr.start_frame, tr.end_frame,
            [tuple(map(float, p)) for p in tr.positions],
        )
        records.append(rec)
        for j, (x, y) in enumerate(tr.positions):
            rows.append((tr.start_frame + j, tr.agent_id, float(x), float(y), EXITED if j == len(tr) - 1 else ACTIVE))
    rows.sort(key=lambda r: (r[0], r[1]))
    length = dataset.frame_count
    enter = np.array([r.enter_frame for r in records])
    exit_ = np.array([r.exit_time for r in records])
    frames = np.arange(length)
    spawned = np.searchsorted(np.sort(enter), frames, side="right")
    done = np.searchsorted(np.sort(exit_), frames, side="right")
    counts = np.column_stack([frames, spawned, spawned - done, done, np.zeros_like(frames)])
    records.sort(key=lambda r: r.agent_id)
    return SimulationLog(length, records, counts, rows)
