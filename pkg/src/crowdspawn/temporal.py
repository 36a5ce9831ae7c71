"""Per-spawn temporal point processes.

The neural model encodes past inter-event times with a GRU and maps the hidden
state through a small MLP to the shape ``k`` and scale ``lam`` of a Weibull
distribution over the next inter-event time::

    f(dt) = (k / lam) * (dt / lam) ** (k - 1) * exp(-(dt / lam) ** k)
    S(dt) = exp(-(dt / lam) ** k)

Training minimises, per sliding window, the negative log density of every
observed gap plus the negative log survival of the quiet stretch between the
last event and the window end. All times are in frames.

The homogeneous Poisson process is kept alongside as the baseline.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import OccupancyMap, TrajectoryDataset
from .errors import InvalidOverlap, ModelLoadFailure, NonFiniteLoss, NoTrainingData
from .nn import GRUCellSpec, MLPSpec, ParamStore, Tensor, adam_update, exp, log, value
from .nn.params import load_checkpoint, save_checkpoint
from .seeding import derive_rng
from .spatial import SpatialModel, sample_spawn_goals

logger = logging.getLogger(__name__)

JITTER = 0.5
HIDDEN_DIM = 32
HEAD_UNITS = 32
INPUT_DIM = 2
# softplus(SOFTPLUS_ONE) == 1: the head starts out as an exponential at the empirical rate
SOFTPLUS_ONE = math.log(math.e - 1.0)


# -- sequences and windows ---------------------------------------------------


@dataclass(frozen=True)
class SpawnSequence:
    spawn_id: int
    times: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.float64).ravel()
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def empty(self) -> bool:
        return len(self.times) == 0

    def inter_event_times(self) -> np.ndarray:
        return np.diff(self.times)


def dedup_times(times) -> np.ndarray:
    """Sort and push every non-increasing time to half a frame after its predecessor."""
    t = np.sort(np.asarray(times, dtype=np.float64))
    for i in range(1, len(t)):
        if t[i] <= t[i - 1]:
            t[i] = t[i - 1] + JITTER
    return t


def extract_spawn_sequences(
    dataset: TrajectoryDataset,
    spatial: SpatialModel,
    spawn_labels,
) -> list[SpawnSequence]:
    """One spawn-time sequence per usable spawn area, from trajectory start frames."""
    labels = np.asarray(spawn_labels)
    if len(labels) != len(dataset.trajectories):
        raise ValueError("spawn labels must align with the dataset's trajectories")
    starts = np.array([tr.start_frame for tr in dataset.trajectories], dtype=np.float64)
    out = []
    for s in spatial.usable_spawns():
        seq = SpawnSequence(s, dedup_times(starts[labels == s]), float(dataset.frame_count))
        if seq.empty:
            logger.warning("spawn area %d has an empty spawn sequence", s)
        out.append(seq)
    return out


@dataclass(frozen=True)
class TrainingWindow:
    start: float
    end: float
    rel_times: np.ndarray
    dt: np.ndarray
    gap: float

    @property
    def n_events(self) -> int:
        return len(self.dt)


def window_from_times(rel_times, length: float, start: float = 0.0) -> TrainingWindow:
    rel = np.asarray(rel_times, dtype=np.float64)
    dt = np.diff(np.concatenate([[0.0], rel]))
    gap = float(length - rel[-1]) if len(rel) else float(length)
    return TrainingWindow(float(start), float(start + length), rel, dt, gap)


def make_windows(seq: SpawnSequence, w: float, o: float) -> list[TrainingWindow]:
    """Sliding windows of ``w`` frames with ``o`` frames of overlap.

    A window starting at ``a`` holds the events in ``(a, a + w]``; the first
    gap is measured from ``a``. Windows without events are kept.
    """
    if o >= w:
        raise InvalidOverlap(f"overlap {o} must be smaller than window {w}")
    if o < 0 or w <= 0:
        raise InvalidOverlap(f"need 0 <= o < w, got w={w}, o={o}")
    if w > seq.horizon:
        raise InvalidOverlap(f"window {w} exceeds the sequence horizon {seq.horizon}")
    stride = w - o
    times = seq.times
    windows = []
    a = 0.0
    while a + w <= seq.horizon + 1e-9:
        lo = np.searchsorted(times, a, side="right")
        hi = np.searchsorted(times, a + w, side="right")
        windows.append(window_from_times(times[lo:hi] - a, w, a))
        a += stride
    return windows


# -- the neural model --------------------------------------------------------


@dataclass
class NTPPModel:
    spawn_id: int
    window: float
    overlap: float
    time_scale: float
    hidden_dim: int = HIDDEN_DIM
    store: ParamStore = field(default_factory=ParamStore)
    meta: dict = field(default_factory=dict)

    @property
    def cell(self) -> GRUCellSpec:
        return GRUCellSpec(INPUT_DIM, self.hidden_dim, prefix="gru")

    @property
    def head(self) -> MLPSpec:
        return MLPSpec((self.hidden_dim, HEAD_UNITS, 2), ("tanh", "softplus"), prefix="head")

    @classmethod
    def initialise(cls, spawn_id: int, window: float, overlap: float, time_scale: float,
                   rng: np.random.Generator, hidden_dim: int = HIDDEN_DIM) -> NTPPModel:
        model = cls(spawn_id, float(window), float(overlap), float(time_scale), hidden_dim)
        model.cell.init(model.store, rng)
        model.head.init(model.store, rng)
        model.store["head.1.b"].data[:] = SOFTPLUS_ONE
        model.store.add("h0", np.zeros(hidden_dim))
        return model

    def features(self, dt):
        """Encoder input for an observed gap: ``(log(1 + dt), dt / w)``."""
        dt = np.asarray(dt, dtype=np.float64)
        return np.stack([np.log1p(dt), dt / self.window], axis=-1)

    def weibull(self, p, h):
        """Shape and scale (in frames) for each row of hidden state ``h``."""
        out = self.head.forward(p, h)
        return out[:, 0], out[:, 1] * self.time_scale

    def initial_state(self, p, batch: int):
        h0 = p["h0"]
        ones = np.ones((batch, 1))
        return ones * h0 if isinstance(h0, Tensor) else np.tile(h0, (batch, 1))

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {
            "kind": "ntpp",
            "spawn_id": self.spawn_id,
            "window": self.window,
            "overlap": self.overlap,
            "time_scale": self.time_scale,
            "hidden_dim": self.hidden_dim,
            **self.meta,
            **(extra or {}),
        }
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path: str | Path) -> NTPPModel:
        store, meta = load_checkpoint(path)
        if meta.get("kind") != "ntpp":
            raise ModelLoadFailure(f"{path} is not an nTPP checkpoint")
        reserved = {"kind", "spawn_id", "window", "overlap", "time_scale", "hidden_dim"}
        return cls(
            int(meta["spawn_id"]), float(meta["window"]), float(meta["overlap"]),
            float(meta["time_scale"]), int(meta["hidden_dim"]), store,
            {k: v for k, v in meta.items() if k not in reserved},
        )


def weibull_logpdf(dt, k, lam):
    """Elementwise log density; works on Tensors and arrays."""
    z = log(np.asarray(dt, dtype=np.float64)) - log(lam)
    return log(k) - log(lam) + (k - 1.0) * z - exp(k * z)


def weibull_logsf(dt, k, lam):
    """Elementwise log survival; exactly zero where ``dt == 0``."""
    dt = np.asarray(dt, dtype=np.float64)
    positive = (dt > 0).astype(np.float64)
    safe = np.where(dt > 0, dt, 1.0)
    return -exp(k * (log(safe) - log(lam))) * positive


def weibull_inverse_cdf(u, k, lam):
    """Gap whose survival probability is ``u``: ``lam * (-log u) ** (1 / k)``."""
    with np.errstate(divide="ignore", over="ignore"):
        return lam * (-np.log(u)) ** (1.0 / k)


def _pad(windows: Sequence[TrainingWindow]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = max((w.n_events for w in windows), default=0)
    dt = np.ones((len(windows), n))
    mask = np.zeros((len(windows), n))
    for i, w in enumerate(windows):
        dt[i, : w.n_events] = w.dt
        mask[i, : w.n_events] = 1.0
    gaps = np.array([w.gap for w in windows])
    return dt, mask, gaps


def window_loglik(model: NTPPModel, p, windows: Sequence[TrainingWindow]):
    """Per-window log-likelihood for a batch of windows; shape (B,).

    ``p`` is ``model.store.tensors()`` to record a tape or ``model.store.arrays()``
    for a plain numpy evaluation.
    """
    dt, mask, gaps = _pad(windows)
    if np.any(dt[mask > 0] <= 0):
        raise NonFiniteLoss("window contains a non-positive inter-event time")
    batch = len(windows)
    h = model.initial_state(p, batch)
    total = np.zeros(batch)
    for i in range(dt.shape[1]):
        k, lam = model.weibull(p, h)
        m = mask[:, i]
        total = total + weibull_logpdf(dt[:, i], k, lam) * m
        h_new = model.cell.step(p, model.features(dt[:, i]), h)
        if m.all():
            h = h_new
        else:
            h = h + (h_new - h) * m[:, None]
    k, lam = model.weibull(p, h)
    return total + weibull_logsf(gaps, k, lam)


def nll_window(model: NTPPModel, window: TrainingWindow) -> float:
    loss = -float(value(window_loglik(model, model.store.arrays(), [window]))[0])
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"window NLL is {loss}")
    return loss


def mean_nll(model: NTPPModel, windows: Sequence[TrainingWindow], batch_size: int = 64) -> float:
    p = model.store.arrays()
    vals = [value(window_loglik(model, p, windows[i : i + batch_size])) for i in range(0, len(windows), batch_size)]
    return -float(np.concatenate(vals).mean())


def train_ntpp(
    seq: SpawnSequence,
    w: float,
    o: float,
    epochs: int = 500,
    lr: float = 1e-4,
    seed: int = 0,
    batch_size: int = 8,
    patience: int = 50,
    min_delta: float = 1e-5,
    hidden_dim: int = HIDDEN_DIM,
) -> NTPPModel:
    """Fit one neural point process to a spawn sequence with Adam.

    Minibatches of windows are drawn in a seeded shuffled order. The epoch
    loss is the mean window NLL seen during that epoch. Training stops early
    once the best loss has not improved by ``min_delta`` for ``patience``
    epochs, and the parameters from the best epoch are returned.
    """
    windows = make_windows(seq, w, o)
    if not any(win.n_events for win in windows):
        raise NoTrainingData(f"spawn {seq.spawn_id}: no window contains an event")
    rng = derive_rng(seed, "ntpp", seq.spawn_id)
    time_scale = seq.horizon / max(len(seq), 1)
    model = NTPPModel.initialise(seq.spawn_id, w, o, time_scale, rng, hidden_dim)
    store = model.store
    # long windows first inside each batch keeps padding low; batches themselves are shuffled
    order = np.argsort([-win.n_events for win in windows], kind="stable")
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]

    best_loss, best_values, best_epoch = math.inf, store.copy_values(), -1
    history = []
    for epoch in range(epochs):
        total = 0.0
        for b in rng.permutation(len(batches)):
            idx = batches[b]
            ll = window_loglik(model, store.tensors(), [windows[i] for i in idx])
            loss = -ll.mean()
            loss.backward()
            adam_update(store, lr)
            total += float(loss.data) * len(idx)
        epoch_loss = total / len(windows)
        history.append(epoch_loss)
        if epoch_loss < best_loss - min_delta:
            best_loss, best_values, best_epoch = epoch_loss, store.copy_values(), epoch
        elif epoch - best_epoch >= patience:
            break
    store.load_values(best_values)
    store.moments.clear()
    model.meta.update(
        {"best_loss": best_loss, "best_epoch": best_epoch, "epochs_run": len(history),
         "history": history, "seed": seed, "lr": lr, "batch_size": batch_size}
    )
    return model


def sample_rollout(model: NTPPModel, length: float, n_rollouts: int = 1, seed=0) -> SpawnSequence:
    """Autoregressive sampling from random standard-normal hidden states.

    With ``n_rollouts > 1`` the horizon is split into equal segments, each an
    independent rollout; segment ``j`` is shifted by ``j * length / n_rollouts``.
    """
    if length <= 0:
        raise ValueError("rollout length must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = model.store.arrays()
    seg = length / n_rollouts
    h = rng.standard_normal((n_rollouts, model.hidden_dim))
    t = np.zeros(n_rollouts)
    alive = np.ones(n_rollouts, dtype=bool)
    events: list[list[float]] = [[] for _ in range(n_rollouts)]
    while alive.any():
        k, lam = model.weibull(p, h)
        dt = weibull_inverse_cdf(rng.random(n_rollouts), k, lam)
        new_t = np.maximum(t + dt, np.nextafter(t, np.inf))
        alive &= new_t < seg
        for j in np.nonzero(alive)[0]:
            events[j].append(new_t[j])
        gap = np.where(alive, new_t - t, 1.0)
        t = np.where(alive, new_t, t)
        h = np.where(alive[:, None], model.cell.step(p, model.features(gap), h), h)
    times = np.concatenate([np.asarray(ev) + j * seg for j, ev in enumerate(events)]) if events else np.zeros(0)
    return SpawnSequence(model.spawn_id, times, float(length))


# -- Poisson baseline ---------------------------------------------------------


@dataclass(frozen=True)
class PoissonModel:
    spawn_id: int
    rate: float

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        doc = {"kind": "poisson", "spawn_id": self.spawn_id, "rate": self.rate, **(extra or {})}
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PoissonModel:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelLoadFailure(f"cannot read {path}: {exc}") from exc
        if doc.get("kind") != "poisson":
            raise ModelLoadFailure(f"{path} is not a Poisson model")
        return cls(int(doc["spawn_id"]), float(doc["rate"]))


def fit_poisson(seq: SpawnSequence) -> PoissonModel:
    if seq.horizon <= 0:
        raise ValueError("horizon must be positive")
    return PoissonModel(seq.spawn_id, len(seq) / seq.horizon)


def sample_poisson(model: PoissonModel, length: float, seed=0) -> SpawnSequence:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if model.rate <= 0:
        return SpawnSequence(model.spawn_id, np.zeros(0), float(length))
    chunk = max(16, int(model.rate * length * 1.2) + 16)
    times = np.zeros(0)
    last = 0.0
    while True:
        t = last + np.cumsum(rng.exponential(1.0 / model.rate, size=chunk))
        times = np.concatenate([times, t[t < length]])
        if t[-1] >= length:
            break
        last = t[-1]
    return SpawnSequence(model.spawn_id, times, float(length))


def poisson_nll_window(model: PoissonModel, window: TrainingWindow) -> float:
    """NLL of a window under a homogeneous Poisson process (exponential gaps)."""
    span = window.end - window.start
    if model.rate <= 0:
        return 0.0 if window.n_events == 0 else math.inf
    return -(window.n_events * math.log(model.rate) - model.rate * span)


# -- spatio-temporal sampling --------------------------------------------------


@dataclass(frozen=True)
class SpawnEvent:
    time: float
    spawn_id: int
    spawn_pos: np.ndarray
    goal_pos: np.ndarray
    goal_id: int


def sample_times(model: NTPPModel | PoissonModel, length: float, n_rollouts: int, rng) -> SpawnSequence:
    if isinstance(model, PoissonModel):
        return sample_poisson(model, length, rng)
    return sample_rollout(model, length, n_rollouts, rng)


def sample_ntpp_gmm(
    temporal: NTPPModel | PoissonModel,
    spatial: SpatialModel,
    length: float,
    n_rollouts: int = 1,
    seed: int = 0,
    occupancy: OccupancyMap | None = None,
) -> list[SpawnEvent]:
    """Spawn times from the temporal model, positions from the spawn-conditional GMM.

    Times and positions come from separate streams derived from ``seed``.
    Passing a :class:`PoissonModel` gives the Poisson-GMM baseline.
    """
    s = temporal.spawn_id
    seq = sample_times(temporal, length, n_rollouts, derive_rng(seed, "time", s))
    if seq.empty:
        return []
    xs, xe, goal = sample_spawn_goals(spatial, s, len(seq), derive_rng(seed, "space", s), occupancy)
    return [SpawnEvent(float(t), s, xs[i], xe[i], int(goal[i])) for i, t in enumerate(seq.times)]
