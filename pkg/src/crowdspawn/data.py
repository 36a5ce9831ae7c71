"""Trajectory and occupancy-map loading.

Frame-table files are comma separated with the header ``frame,agent_id,x,y``.
Rows may come in any order; they are grouped by agent and sorted by frame.
Missing frames inside one agent's track are filled by linear interpolation.

Occupancy grids are plain text::

    width height resolution origin_x origin_y
    ..#.
    ....

Grid line ``i`` (0-based, after the header) covers world y in
``[origin_y + i*res, origin_y + (i+1)*res)``; character ``j`` covers x in
``[origin_x + j*res, origin_x + (j+1)*res)``. ``#`` is an obstacle, ``.`` free.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, MalformedGrid, MalformedRow, NonMonotonicFrames

log = logging.getLogger(__name__)

FRAME_TABLE_HEADER = ("frame", "agent_id", "x", "y")
RAY_BISECTIONS = 12  # refines hits to ~resolution / 8000


@dataclass(frozen=True)
class Trajectory:
    agent_id: int
    start_frame: int
    positions: np.ndarray  # (n, 2), one row per consecutive frame

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.positions) - 1

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.start_frame == other.start_frame
            and np.array_equal(self.positions, other.positions)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class TrajectoryDataset:
    trajectories: tuple[Trajectory, ...]
    frame_count: int
    agent_count: int
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    name: str = field(default="", compare=False)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def make_dataset(trajectories: Iterable[Trajectory], name: str = "") -> TrajectoryDataset:
    """Build a dataset from trajectories, dropping any shorter than two positions."""
    kept = []
    for tr in trajectories:
        if len(tr) < 2:
            log.debug("dropping agent %d: single observation", tr.agent_id)
            continue
        if not np.all(np.isfinite(tr.positions)):
            raise MalformedRow(f"agent {tr.agent_id} has non-finite positions")
        kept.append(tr)
    if not kept:
        raise EmptyDataset("no trajectory with at least two positions")
    allpos = np.concatenate([t.positions for t in kept])
    lo = allpos.min(axis=0)
    hi = allpos.max(axis=0)
    return TrajectoryDataset(
        trajectories=tuple(kept),
        frame_count=max(t.end_frame for t in kept) + 1,
        agent_count=len(kept),
        bounds=(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])),
        name=name,
    )


def _parse_index(text: str, what: str, lineno: int) -> int:
    try:
        v = float(text)
    except ValueError:
        raise MalformedRow(f"line {lineno}: {what} {text!r} is not numeric") from None
    if not math.isfinite(v) or v < 0 or v != int(v):
        raise MalformedRow(f"line {lineno}: {what} {text!r} is not a non-negative integer")
    return int(v)


def _parse_coord(text: str, what: str, lineno: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise MalformedRow(f"line {lineno}: {what} {text!r} is not numeric") from None
    if not math.isfinite(v):
        raise MalformedRow(f"line {lineno}: {what} is not finite")
    return v


def apply_affine(points: np.ndarray, transform: Sequence[Sequence[float]] | None) -> np.ndarray:
    """Map (n, 2) points through a 2x3 affine matrix ``[[a, b, tx], [c, d, ty]]``."""
    if transform is None:
        return points
    m = np.asarray(transform, dtype=np.float64)
    if m.shape != (2, 3):
        raise DimensionMismatch(f"affine transform must be 2x3, got {m.shape}")
    return points @ m[:, :2].T + m[:, 2]


def load_trajectories(
    path: str | Path,
    format: str = "frame-table",
    transform: Sequence[Sequence[float]] | None = None,
) -> TrajectoryDataset:
    if format != "frame-table":
        raise ValueError(f"unsupported trajectory format {format!r}")
    path = Path(path)
    rows: dict[int, list[tuple[int, float, float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDataset(f"{path} is empty")
        if tuple(h.strip() for h in header) != FRAME_TABLE_HEADER:
            raise MalformedRow(f"{path}: header must be {','.join(FRAME_TABLE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise MalformedRow(f"line {lineno}: expected 4 fields, got {len(row)}")
            frame = _parse_index(row[0], "frame", lineno)
            agent = _parse_index(row[1], "agent_id", lineno)
            x = _parse_coord(row[2], "x", lineno)
            y = _parse_coord(row[3], "y", lineno)
            rows.setdefault(agent, []).append((frame, x, y))
    if not rows:
        raise EmptyDataset(f"{path} contains no rows")

    trajectories = []
    for agent in sorted(rows):
        obs = sorted(rows[agent], key=lambda r: r[0])
        frames = np.array([r[0] for r in obs], dtype=np.int64)
        dup = np.nonzero(np.diff(frames) == 0)[0]
        if dup.size:
            raise NonMonotonicFrames(f"agent {agent} has duplicate frame {frames[dup[0]]}")
        xy = np.array([(r[1], r[2]) for r in obs], dtype=np.float64)
        xy = apply_affine(xy, transform)
        full = np.arange(frames[0], frames[-1] + 1)
        if len(full) != len(frames):
            xy = np.column_stack([np.interp(full, frames, xy[:, 0]), np.interp(full, frames, xy[:, 1])])
            # np.interp reproduces the knots exactly, so observed positions survive untouched
        trajectories.append(Trajectory(agent, int(frames[0]), xy))
    return make_dataset(trajectories, name=path.stem)


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    """Write a frame-table file. Coordinates use ``repr`` so reloading is bit-exact."""
    lines = [",".join(FRAME_TABLE_HEADER)]
    for tr in trajectories:
        for i, (x, y) in enumerate(tr.positions):
            lines.append(f"{tr.start_frame + i},{tr.agent_id},{float(x)!r},{float(y)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def split_endpoints(dataset: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
    """First and last position of every trajectory, as two aligned (N, 2) arrays."""
    starts = np.array([tr.positions[0] for tr in dataset.trajectories])
    ends = np.array([tr.positions[-1] for tr in dataset.trajectories])
    return starts, ends


@dataclass(frozen=True)
class OccupancyMap:
    resolution: float
    origin: tuple[float, float]
    grid: np.ndarray  # (height, width) bool, True = obstacle

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise MalformedGrid("resolution must be positive")
        if self.grid.size == 0:
            raise MalformedGrid("grid is empty")

    @property
    def extent(self) -> tuple[float, float]:
        h, w = self.grid.shape
        return w * self.resolution, h * self.resolution

    def occupied(self, points) -> np.ndarray:
        """Obstacle test for (n, 2) points. Points outside the grid count as free."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        col = np.floor((pts[:, 0] - self.origin[0]) / self.resolution).astype(np.int64)
        row = np.floor((pts[:, 1] - self.origin[1]) / self.resolution).astype(np.int64)
        h, w = self.grid.shape
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        out = np.zeros(len(pts), dtype=bool)
        out[inside] = self.grid[row[inside], col[inside]]
        return out

    def is_free(self, point) -> bool:
        return not bool(self.occupied(point)[0])

    def raycast(self, positions, n_rays: int, max_range: float) -> np.ndarray:
        """Distance to the first obstacle along ``n_rays`` evenly spaced world-frame bearings.

        Marches in steps of half a cell, then bisects between the last free
        sample and the first hit. Returns ``max_range`` when nothing is hit.
        """
        pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        angles = np.arange(n_rays) * (2 * np.pi / n_rays)
        dirs = np.column_stack([np.cos(angles), np.sin(angles)])
        steps = np.arange(1, int(np.ceil(max_range / (0.5 * self.resolution))) + 1) * 0.5 * self.resolution
        steps = np.minimum(steps, max_range)
        out = np.full((len(pos), n_rays), float(max_range))
        for i, p in enumerate(pos):
            samples = p[None, None, :] + steps[None, :, None] * dirs[:, None, :]
            hit = self.occupied(samples.reshape(-1, 2)).reshape(n_rays, len(steps))
            any_hit = hit.any(axis=1)
            first = hit.argmax(axis=1)
            for r in np.flatnonzero(any_hit):
                lo = steps[first[r] - 1] if first[r] > 0 else 0.0
                hi = steps[first[r]]
                for _ in range(RAY_BISECTIONS):
                    mid = 0.5 * (lo + hi)
                    if self.occupied((p + mid * dirs[r])[None, :])[0]:
                        hi = mid
                    else:
                        lo = mid
                out[i, r] = hi
        return out


def load_occupancy(path: str | Path) -> OccupancyMap:
    lines = [ln.rstrip("\r\n") for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise MalformedGrid(f"{path} is empty")
    head = lines[0].split()
    if len(head) != 5:
        raise MalformedGrid("header must be: width height resolution origin_x origin_y")
    try:
        width, height = int(head[0]), int(head[1])
        resolution, ox, oy = float(head[2]), float(head[3]), float(head[4])
    except ValueError as exc:
        raise MalformedGrid(f"bad header: {exc}") from None
    if width <= 0 or height <= 0:
        raise MalformedGrid("width and height must be positive")
    body = lines[1:]
    if len(body) != height:
        raise DimensionMismatch(f"header says {height} rows, found {len(body)}")
    grid = np.zeros((height, width), dtype=bool)
    for i, line in enumerate(body):
        line = line.strip()
        if len(line) != width:
            raise DimensionMismatch(f"row {i} has {len(line)} cells, header says {width}")
        bad = set(line) - {"#", "."}
        if bad:
            raise MalformedGrid(f"row {i} has unknown cell characters {sorted(bad)}")
        grid[i] = [c == "#" for c in line]
    return OccupancyMap(resolution=resolution, origin=(ox, oy), grid=grid)


def write_occupancy(path: str | Path, occ: OccupancyMap) -> None:
    h, w = occ.grid.shape
    lines = [f"{w} {h} {occ.resolution!r} {occ.origin[0]!r} {occ.origin[1]!r}"]
    lines += ["".join("#" if c else "." for c in row) for row in occ.grid]
    Path(path).write_text("\n".join(lines) + "\n")
