"""Agent control: a scripted goal seeker and a behaviour-cloned MLP.

Both produce a per-frame displacement (single-integrator dynamics). The
observation is the world-frame offset to the goal, the previous displacement
and, optionally, raycast distances to obstacles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TrajectoryDataset
from .errors import ModelLoadFailure, NoDemonstrations
from .nn import MLPSpec, ParamStore, adam_update
from .nn.params import CHECKPOINT_FORMAT, store_from_document
from .seeding import derive_rng

REPULSE_RANGE = 0.5
REPULSE_GAIN = 0.5
BC_HIDDEN = 32


@dataclass(frozen=True)
class Observation:
    goal_offset: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    raycasts: tuple[float, ...] = ()

    def vector(self) -> np.ndarray:
        return np.array([*self.goal_offset, *self.velocity, *self.raycasts], dtype=np.float64)


def _clip_norm(actions: np.ndarray, v_max: float) -> np.ndarray:
    norms = np.linalg.norm(actions, axis=1, keepdims=True)
    factor = np.minimum(1.0, v_max / np.maximum(norms, 1e-300))
    return actions * factor


def scripted_actions(obs: np.ndarray, v_max: float, n_rays: int = 0) -> np.ndarray:
    """Vectorised scripted policy over an (n, 4 + n_rays) observation matrix."""
    obs = np.atleast_2d(obs)
    offset = obs[:, :2]
    dist = np.linalg.norm(offset, axis=1, keepdims=True)
    step = np.minimum(v_max, dist)
    act = np.divide(offset * step, dist, out=np.zeros_like(offset), where=dist > 0)
    if n_rays:
        rays = obs[:, 4 : 4 + n_rays]
        angles = np.arange(n_rays) * (2 * np.pi / n_rays)
        dirs = np.column_stack([np.cos(angles), np.sin(angles)])
        push = np.clip(REPULSE_RANGE - rays, 0.0, None) / REPULSE_RANGE
        act = act - REPULSE_GAIN * v_max * (push @ dirs)
    return _clip_norm(act, v_max)


def scripted_step(obs: Observation, v_max: float) -> np.ndarray:
    return scripted_actions(obs.vector()[None, :], v_max, len(obs.raycasts))[0]


@dataclass
class PolicySpec:
    kind: str  # "scripted" or "cloned"
    v_max: float
    n_rays: int = 0
    mlp: MLPSpec | None = None
    store: ParamStore | None = None
    obs_mean: np.ndarray | None = None
    obs_std: np.ndarray | None = None
    act_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.kind not in ("scripted", "cloned"):
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Actions for an (n, obs_dim) batch; every row's norm is at most ``v_max``."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if self.kind == "scripted":
            return scripted_actions(obs, self.v_max, self.n_rays)
        x = (obs - self.obs_mean) / self.obs_std
        out = self.mlp.forward(self.store.arrays(), x) * self.act_scale
        return _clip_norm(out, self.v_max)

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "v_max": self.v_max, "n_rays": self.n_rays, "meta": self.meta}
        if self.kind == "cloned":
            doc.update(
                sizes=list(self.mlp.sizes),
                activations=list(self.mlp.activations),
                obs_mean=self.obs_mean.tolist(),
                obs_std=self.obs_std.tolist(),
                act_scale=self.act_scale,
                params={
                    "format": CHECKPOINT_FORMAT,
                    "arrays": {
                        k: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
                        for k, t in self.store.params.items()
                    },
                },
            )
        return doc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, doc: dict) -> PolicySpec:
        kind = doc.get("kind")
        if kind == "scripted":
            return cls("scripted", float(doc["v_max"]), int(doc.get("n_rays", 0)), meta=doc.get("meta", {}))
        if kind != "cloned":
            raise ModelLoadFailure(f"unknown policy kind {kind!r}")
        store, _ = store_from_document(doc["params"], source="policy")
        mlp = MLPSpec(tuple(doc["sizes"]), tuple(doc["activations"]), prefix="policy")
        return cls(
            "cloned", float(doc["v_max"]), int(doc.get("n_rays", 0)), mlp, store,
            np.array(doc["obs_mean"]), np.array(doc["obs_std"]), float(doc["act_scale"]), doc.get("meta", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> PolicySpec:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ModelLoadFailure(f"cannot load policy {path}: {exc}") from exc


def policy_step(spec: PolicySpec, obs: Observation) -> np.ndarray:
    return spec.act(obs.vector()[None, :])[0]


@dataclass(frozen=True)
class Demonstrations:
    observations: np.ndarray  # (n, 4)
    actions: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return len(self.actions)


def build_demonstrations(dataset: TrajectoryDataset, spatial=None) -> Demonstrations:
    """Observation/action pairs from every consecutive position pair.

    The goal is the trajectory's final position and the velocity is the
    previous displacement (zero on the first step). ``spatial`` is accepted for
    interface symmetry; goals come from the trajectories themselves.
    """
    obs, acts = [], []
    for tr in dataset.trajectories:
        pos = tr.positions
        delta = np.diff(pos, axis=0)
        vel = np.vstack([np.zeros((1, 2)), delta[:-1]])
        offset = pos[-1] - pos[:-1]
        obs.append(np.hstack([offset, vel]))
        acts.append(delta)
    if not obs:
        return Demonstrations(np.zeros((0, 4)), np.zeros((0, 2)))
    return Demonstrations(np.vstack(obs), np.vstack(acts))


def train_bc(
    demos: Demonstrations,
    epochs: int = 1000,
    lr: float = 1e-4,
    seed: int = 0,
    v_max: float = 1.5,
    batch_size: int = 64,
    val_fraction: float = 0.1,
) -> PolicySpec:
    """Behaviour cloning: MSE regression of displacements with Adam.

    A seeded 90/10 split holds out validation pairs; the returned policy
    carries the weights from the epoch with the lowest validation MSE.
    """
    n = len(demos)
    if n == 0:
        raise NoDemonstrations("no demonstration pairs")
    rng = derive_rng(seed, "bc")
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction)) if n >= 10 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    X, Y = demos.observations, demos.actions
    obs_mean = X[train_idx].mean(axis=0)
    obs_std = np.maximum(X[train_idx].std(axis=0), 1e-6)
    act_scale = float(max(np.abs(Y[train_idx]).max(), 1e-6))
    Xn = (X - obs_mean) / obs_std
    Yn = Y / act_scale

    mlp = MLPSpec((X.shape[1], BC_HIDDEN, BC_HIDDEN, 2), ("tanh", "tanh", "identity"), prefix="policy")
    store = ParamStore()
    mlp.init(store, rng)

    def mse(idx) -> float:
        pred = mlp.forward(store.arrays(), Xn[idx]) * act_scale
        return float(((pred - Y[idx]) ** 2).sum(axis=1).mean())

    eval_idx = val_idx if n_val else train_idx
    best_val, best_values, best_epoch = math.inf, store.copy_values(), -1
    train_hist, val_hist = [], []
    for epoch in range(epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            pred = mlp.forward(store.tensors(), Xn[idx])
            loss = ((pred - Yn[idx]) ** 2).sum(axis=1).mean()
            loss.backward()
            adam_update(store, lr)
            total += float(loss.data) * len(idx)
        train_hist.append(total / len(order) * act_scale ** 2)
        v = mse(eval_idx)
        val_hist.append(v)
        if v < best_val:
            best_val, best_values, best_epoch = v, store.copy_values(), epoch
    store.load_values(best_values)
    store.moments.clear()
    meta = {"val_mse": best_val, "best_epoch": best_epoch, "train_history": train_hist,
            "val_history": val_hist, "seed": seed, "lr": lr, "n_train": len(train_idx), "n_val": n_val}
    return PolicySpec("cloned", v_max, 0, mlp, store, obs_mean, obs_std, act_scale, meta)
