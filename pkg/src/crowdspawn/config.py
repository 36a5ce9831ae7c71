"""Run configuration.

Values are resolved in this order, later sources winning:

1. built-in defaults (below),
2. the YAML (or JSON) file passed with ``--config``,
3. environment variables ``CROWDSPAWN_<SECTION>__<KEY>`` (e.g.
   ``CROWDSPAWN_NTPP__EPOCHS=100``) or ``CROWDSPAWN_<KEY>`` for top-level keys
   (e.g. ``CROWDSPAWN_SEED=7``); values are parsed as YAML scalars,
4. command-line flags (``--seed``, ``--jobs``, ``--baseline``, ``--out``).
"""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigInvalid

ENV_PREFIX = "CROWDSPAWN_"

# DBSCAN settings per scene; the synthetic scenes share one
PRESETS = {
    "gc": {"eps": 0.2, "min_samples": 20},
    "forum": {"eps": 2.0, "min_samples": 5},
    "eth": {"eps": 0.8, "min_samples": 3},
    "synthetic": {"eps": 1.0, "min_samples": 5},
}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "jobs": 1,
    "output": "runs/default",
    "dataset": {"path": None, "preset": None, "transform": None, "occupancy": None},
    "clustering": {"eps": None, "min_samples": None},
    "ntpp": {"window": 500, "overlap": 50, "epochs": 500, "lr": 1e-4, "batch_size": 8, "patience": 50},
    "sampling": {"length": 10000, "n_rollouts": 1},
    "policy": {"kind": "scripted", "v_max_mps": 1.5, "fps": 2.5, "v_max": None,
               "bc_epochs": 1000, "bc_lr": 1e-4, "action_noise": 0.0},
    "simulation": {"goal_radius": 0.5, "max_lifetime": 5000, "baseline": None},
    "evaluate": {"bin_size": 10},
    "ablation": {"windows": [100, 500, 1000], "overlaps": [5, 50], "n_rollouts": [1, 10],
                 "rollout_lengths": [1000, 10000], "total_length": 10000, "samples": 5, "epochs": 500},
    "synth": {"scene": "poisson", "horizon": None, "path": None},
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _env_overrides(environ: Mapping[str, str]) -> dict:
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        val = yaml.safe_load(raw)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = val
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigInvalid(f"{path}: top level must be a mapping")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigInvalid(f"{path}: unknown sections {sorted(unknown)}")
        cfg = _merge(cfg, doc)
        base_dir = path.parent
    cfg = _merge(cfg, _env_overrides(os.environ if environ is None else environ))
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    cfg["_base_dir"] = str(base_dir)
    return cfg


def resolve_path(cfg: dict, p: str | None) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base_dir"]) / p


def clustering_params(cfg: dict) -> tuple[float, int]:
    preset = cfg["dataset"].get("preset")
    base = PRESETS.get(preset, {}) if preset else {}
    eps = cfg["clustering"].get("eps") or base.get("eps")
    min_samples = cfg["clustering"].get("min_samples") or base.get("min_samples")
    if eps is None or min_samples is None:
        raise ConfigInvalid("clustering.eps/min_samples not set and no dataset.preset given")
    return float(eps), int(min_samples)


def v_max(cfg: dict) -> float:
    pol = cfg["policy"]
    if pol.get("v_max") is not None:
        return float(pol["v_max"])
    return float(pol["v_max_mps"]) / float(pol["fps"])


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigInvalid(msg)


def validate(cfg: dict, command: str) -> None:
    """Range and existence checks for the sections a subcommand reads."""
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    _require(isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1, "jobs must be >= 1")
    ds = cfg["dataset"]
    if ds.get("preset") is not None:
        _require(ds["preset"] in PRESETS, f"dataset.preset must be one of {sorted(PRESETS)}")
    if ds.get("transform") is not None:
        t = ds["transform"]
        _require(isinstance(t, list) and len(t) == 2 and all(isinstance(r, list) and len(r) == 3 for r in t),
                 "dataset.transform must be a 2x3 matrix")
    if command in ("ingest", "fit", "evaluate", "ablate"):
        _require(ds.get("path") is not None, "dataset.path is required")
        p = resolve_path(cfg, ds["path"])
        _require(p.exists(), f"dataset file {p} does not exist")
    if ds.get("occupancy") is not None and command in ("ingest", "fit", "simulate", "evaluate"):
        p = resolve_path(cfg, ds["occupancy"])
        _require(p.exists(), f"occupancy file {p} does not exist")
    if command in ("fit", "ablate"):
        eps, ms = clustering_params(cfg)
        _require(eps > 0 and ms >= 1, "clustering needs eps > 0 and min_samples >= 1")
        n = cfg["ntpp"]
        _require(n["window"] > 0 and 0 <= n["overlap"] < n["window"], "ntpp needs 0 <= overlap < window")
        _require(1 <= n["epochs"] <= 500, "ntpp.epochs must be in [1, 500]")
        _require(n["lr"] > 0, "ntpp.lr must be positive")
        _require(n["batch_size"] >= 1, "ntpp.batch_size must be >= 1")
    if command in ("fit", "simulate", "evaluate", "ablate"):
        pol = cfg["policy"]
        _require(pol["kind"] in ("scripted", "cloned"), "policy.kind must be scripted or cloned")
        _require(v_max(cfg) > 0, "policy v_max must be positive")
        _require(pol["bc_epochs"] >= 1 and pol["bc_lr"] > 0, "policy.bc_epochs/bc_lr out of range")
        _require(pol["action_noise"] >= 0, "policy.action_noise must be >= 0")
    if command in ("simulate", "evaluate"):
        s = cfg["sampling"]
        _require(s["length"] > 0 and s["n_rollouts"] >= 1, "sampling needs length > 0 and n_rollouts >= 1")
        sim = cfg["simulation"]
        _require(sim["goal_radius"] > 0 and sim["max_lifetime"] >= 1, "simulation.goal_radius/max_lifetime out of range")
        _require(sim["baseline"] in (None, "poisson"), "simulation.baseline must be null or 'poisson'")
    if command == "ablate":
        a = cfg["ablation"]
        _require(all(w > o >= 0 for w in a["windows"] for o in a["overlaps"]), "every ablation overlap must be < every window")
        _require(a["samples"] >= 1 and a["total_length"] > 0, "ablation.samples/total_length out of range")
        _require(1 <= a["epochs"] <= 500, "ablation.epochs must be in [1, 500]")
    if command == "synth":
        from .synth import SCENES

        _require(cfg["synth"]["scene"] in SCENES, f"synth.scene must be one of {sorted(SCENES)}")
        h = cfg["synth"].get("horizon")
        _require(h is None or h > 0, "synth.horizon must be positive")
