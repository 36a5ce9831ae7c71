"""Command-line entry point: ``crowdspawn <subcommand> --config run.yaml``.

Every subcommand validates the whole config before it writes anything, and
writes its outputs into a scratch directory that is renamed into place only
on success. Outputs carry no timestamps, so a fixed seed gives byte-identical
files.

Exit codes: 0 success, 2 config error, 3 data or model error, 4 invariant
violation.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .data import load_occupancy, load_trajectories, write_trajectories
from .errors import ConfigError, CrowdSpawnError, DataError, EmptySample, InvariantViolation, ModelError
from .metrics import AblationGrid, compute_stats, flow_export, ks_distance, run_ablation, summarize
from .orchestrator import check_log, replay_log, run
from .policy import PolicySpec, build_demonstrations, train_bc
from .seeding import derive_int
from .spatial import SpatialModel, fit_spatial
from .synth import generate_scene, write_scene
from .temporal import NTPPModel, PoissonModel, extract_spawn_sequences, fit_poisson, train_ntpp

log = logging.getLogger("crowdspawn")

MANIFEST_FORMAT = "crowdspawn-manifest/1"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


@contextlib.contextmanager
def staged(target: Path):
    """Yield a scratch directory that replaces ``target`` only if the block succeeds."""
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}-", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    tmp.rename(target)


def _out(cfg: dict) -> Path:
    return cfgmod.resolve_path(cfg, cfg["output"])


def _load_dataset(cfg: dict):
    ds = cfg["dataset"]
    if ds.get("path") is None:
        raise ConfigError("dataset.path is required")
    path = cfgmod.resolve_path(cfg, ds["path"])
    if not path.exists():
        raise ConfigError(f"dataset file {path} does not exist")
    return load_trajectories(path, transform=ds.get("transform"))


def _load_occupancy(cfg: dict):
    p = cfg["dataset"].get("occupancy")
    return None if p is None else load_occupancy(cfgmod.resolve_path(cfg, p))


def _models_dir(cfg: dict) -> Path:
    return _out(cfg) / "models"


def _load_models(cfg: dict):
    mdir = _models_dir(cfg)
    mpath = mdir / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"no model manifest at {mpath}; run `crowdspawn fit` first")
    manifest = json.loads(mpath.read_text())
    spatial = SpatialModel.load(mdir / manifest["spatial"])
    ntpp = {e["spawn_id"]: NTPPModel.load(mdir / e["ntpp"]) for e in manifest["spawns"] if e.get("ntpp")}
    poisson = {e["spawn_id"]: PoissonModel.load(mdir / e["poisson"]) for e in manifest["spawns"]}
    policy = PolicySpec.load(mdir / manifest["policy"])
    labels = json.loads((mdir / manifest["labels"]).read_text())
    return manifest, spatial, ntpp, poisson, policy, labels


def _sim_kwargs(cfg: dict) -> dict:
    sim, pol = cfg["simulation"], cfg["policy"]
    return {"goal_radius": float(sim["goal_radius"]), "max_lifetime": int(sim["max_lifetime"]),
            "action_noise": float(pol["action_noise"])}


# -- subcommands -------------------------------------------------------------


def cmd_ingest(cfg: dict) -> int:
    dataset = _load_dataset(cfg)
    out = _out(cfg) / "ingest"
    with staged(out) as tmp:
        write_trajectories(tmp / "dataset.csv", dataset.trajectories)
        _dump(tmp / "summary.json", {
            "source": cfg["dataset"]["path"], "seed": cfg["seed"], "frames": dataset.frame_count,
            "agents": dataset.agent_count, "bounds": list(dataset.bounds),
        })
    print(f"frames: {dataset.frame_count}")
    print(f"agents: {dataset.agent_count}")
    return EXIT_OK


def _train_one(args):
    seq, w, o, seed, kw = args
    return train_ntpp(seq, w, o, seed=seed, **kw)


def cmd_fit(cfg: dict) -> int:
    seed = cfg["seed"]
    dataset = _load_dataset(cfg)
    _load_occupancy(cfg)
    eps, min_samples = cfgmod.clustering_params(cfg)
    spatial, s_lab, g_lab = fit_spatial(dataset, eps, min_samples)
    seqs = extract_spawn_sequences(dataset, spatial, s_lab)
    n = cfg["ntpp"]
    w, o = n["window"], n["overlap"]
    kw = {"epochs": int(n["epochs"]), "lr": float(n["lr"]), "batch_size": int(n["batch_size"]),
          "patience": int(n["patience"])}
    trainable = [s for s in seqs if not s.empty and w <= s.horizon]
    jobs = [(s, w, o, derive_int(seed, "ntpp", s.spawn_id), kw) for s in trainable]
    if cfg["jobs"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            models = list(pool.map(_train_one, jobs))
    else:
        models = [_train_one(j) for j in jobs]
    ntpp = {m.spawn_id: m for m in models}

    pol = cfg["policy"]
    if pol["kind"] == "cloned":
        policy = train_bc(build_demonstrations(dataset), epochs=int(pol["bc_epochs"]), lr=float(pol["bc_lr"]),
                          seed=derive_int(seed, "bc"), v_max=cfgmod.v_max(cfg))
    else:
        policy = PolicySpec("scripted", cfgmod.v_max(cfg))

    out = _models_dir(cfg)
    with staged(out) as tmp:
        spatial.save(tmp / "spatial.json")
        _dump(tmp / "labels.json", {"spawn": s_lab.tolist(), "goal": g_lab.tolist()})
        policy.save(tmp / "policy.json")
        entries = []
        for seq in seqs:
            s = seq.spawn_id
            entry = {"spawn_id": s, "events": len(seq), "window": w, "overlap": o}
            poisson = fit_poisson(seq)
            poisson.save(tmp / f"poisson_s{s}.json")
            entry["poisson"] = f"poisson_s{s}.json"
            entry["rate"] = poisson.rate
            if s in ntpp:
                m = ntpp[s]
                m.save(tmp / f"ntpp_s{s}.json")
                entry.update(ntpp=f"ntpp_s{s}.json", seed=m.meta["seed"], best_loss=m.meta["best_loss"],
                             best_epoch=m.meta["best_epoch"], epochs_run=m.meta["epochs_run"])
            else:
                entry["ntpp"] = None
            entries.append(entry)
        _dump(tmp / "manifest.json", {
            "format": MANIFEST_FORMAT, "version": __version__, "seed": seed,
            "dataset": {"path": cfg["dataset"]["path"], "frames": dataset.frame_count, "agents": dataset.agent_count},
            "clustering": {"eps": eps, "min_samples": min_samples},
            "spatial": "spatial.json", "labels": "labels.json", "policy": "policy.json",
            "spawns": entries,
        })
    print(f"spawn areas: {len(spatial.spawn_areas)} (usable {len(spatial.usable_spawns())}), "
          f"goal areas: {len(spatial.goal_areas)}, nTPP models: {len(ntpp)}")
    return EXIT_OK


def _temporals(ntpp: dict, poisson: dict, baseline: str | None) -> dict:
    if baseline == "poisson":
        return dict(poisson)
    # spawns too short for a window fall back to their Poisson fit
    return {s: ntpp.get(s, poisson[s]) for s in poisson}


def _simulate(cfg, spatial, temporals, policy, occupancy, seed):
    s = cfg["sampling"]
    return run(spatial, temporals, policy, int(s["length"]), int(s["n_rollouts"]), seed, occupancy,
               **_sim_kwargs(cfg))


def _require_clean(sim_log, label: str) -> None:
    problems = check_log(sim_log)
    if problems:
        raise InvariantViolation(f"{label}: " + "; ".join(problems[:5]))


def cmd_simulate(cfg: dict) -> int:
    manifest, spatial, ntpp, poisson, policy, _ = _load_models(cfg)
    occupancy = _load_occupancy(cfg)
    baseline = cfg["simulation"]["baseline"]
    sim_log = _simulate(cfg, spatial, _temporals(ntpp, poisson, baseline), policy, occupancy, cfg["seed"])
    _require_clean(sim_log, "simulate")
    stats = compute_stats(sim_log, bin_size=int(cfg["evaluate"]["bin_size"]))
    name = "simulate-poisson" if baseline == "poisson" else "simulate"
    with staged(_out(cfg) / name) as tmp:
        sim_log.write(tmp)
        _dump(tmp / "stats.json", stats.as_dict())
        _dump(tmp / "manifest.json", {"seed": cfg["seed"], "baseline": baseline, "length": cfg["sampling"]["length"],
                                      "n_rollouts": cfg["sampling"]["n_rollouts"], "models": manifest["spawns"]})
    c = sim_log.counts
    print(f"agents: {len(sim_log.records)}, frames: {len(c)}, exited: {int(c[-1, 3]) if len(c) else 0}, "
          f"timed out: {int(c[-1, 4]) if len(c) else 0}")
    print("conservation: ok (spawned = active + exited + timed_out at every frame)")
    return EXIT_OK


def _histogram_table(samples: dict[str, np.ndarray], integer: bool) -> list[str]:
    """CSV rows ``value,<source counts...>``; real-valued samples are binned to unit width."""
    keys = list(samples)
    conv = {k: (np.asarray(v).astype(np.int64) if integer else np.floor(np.asarray(v)).astype(np.int64))
            for k, v in samples.items()}
    top = max((int(v.max()) for v in conv.values() if v.size), default=0)
    counts = {k: np.bincount(v[v >= 0], minlength=top + 1) for k, v in conv.items()}
    rows = ["value," + ",".join(keys)]
    rows += [f"{i}," + ",".join(str(int(counts[k][i])) for k in keys) for i in range(top + 1)]
    return rows


def _ks_or_none(a, b):
    try:
        return ks_distance(a, b)
    except EmptySample:
        return None


def cmd_evaluate(cfg: dict) -> int:
    manifest, spatial, ntpp, poisson, policy, labels = _load_models(cfg)
    dataset = _load_dataset(cfg)
    occupancy = _load_occupancy(cfg)
    bin_size = int(cfg["evaluate"]["bin_size"])
    seed = cfg["seed"]

    gt_log = replay_log(dataset, labels["spawn"], labels["goal"])
    sim_ntpp = _simulate(cfg, spatial, _temporals(ntpp, poisson, None), policy, occupancy, seed)
    sim_poisson = _simulate(cfg, spatial, _temporals(ntpp, poisson, "poisson"), policy, occupancy, seed)
    _require_clean(sim_ntpp, "nTPP-GMM run")
    _require_clean(sim_poisson, "Poisson-GMM run")

    stats = {
        "gt": compute_stats(gt_log, bin_size=bin_size),
        "ntpp_gmm": compute_stats(sim_ntpp, bin_size=bin_size),
        "poisson_gmm": compute_stats(sim_poisson, bin_size=bin_size),
    }
    fields = ("agents_per_frame", "inter_spawn_times", "spawns_per_window", "time_in_scene")
    pairs = (("gt", "ntpp_gmm"), ("gt", "poisson_gmm"), ("ntpp_gmm", "poisson_gmm"))
    ks = {f: {f"{a}_vs_{b}": _ks_or_none(getattr(stats[a], f), getattr(stats[b], f)) for a, b in pairs}
          for f in fields}
    report = {
        "seed": seed,
        "length": cfg["sampling"]["length"],
        "bin_size": bin_size,
        "summary": {src: {f: summarize(getattr(st, f)) for f in fields} for src, st in stats.items()},
        "ks": ks,
        "agents": {"gt": len(gt_log.records), "ntpp_gmm": len(sim_ntpp.records),
                   "poisson_gmm": len(sim_poisson.records)},
    }

    with staged(_out(cfg) / "evaluate") as tmp:
        n = max(len(st.agents_per_frame) for st in stats.values())
        apf = {k: np.pad(st.agents_per_frame, (0, n - len(st.agents_per_frame))) for k, st in stats.items()}
        rows = ["frame," + ",".join(apf)]
        rows += [f"{i}," + ",".join(str(int(v[i])) for v in apf.values()) for i in range(n)]
        (tmp / "agents_per_frame.csv").write_text("\n".join(rows) + "\n")
        tables = {
            "agents_per_frame_hist.csv": ({k: st.agents_per_frame for k, st in stats.items()}, True),
            "inter_spawn_times.csv": ({k: st.inter_spawn_times[st.inter_spawn_times < bin_size]
                                       for k, st in stats.items()}, False),
            "spawns_per_window.csv": ({k: st.spawns_per_window for k, st in stats.items()}, True),
            "time_in_scene.csv": ({k: st.time_in_scene for k, st in stats.items()}, True),
        }
        for name, (samples, integer) in tables.items():
            (tmp / name).write_text("\n".join(_histogram_table(samples, integer)) + "\n")
        ks_rows = ["statistic," + ",".join(f"{a}_vs_{b}" for a, b in pairs)]
        ks_rows += [f + "," + ",".join("" if v is None else repr(v) for v in ks[f].values()) for f in fields]
        (tmp / "ks.csv").write_text("\n".join(ks_rows) + "\n")
        report["flows"] = {"gt": flow_export(gt_log, spatial, tmp / "flows_gt"),
                           "ntpp_gmm": flow_export(sim_ntpp, spatial, tmp / "flows_ntpp_gmm")}
        _dump(tmp / "report.json", report)

    print("statistic          gt~ntpp   gt~poisson  ntpp~poisson")
    for f in fields:
        vals = ["   n/a  " if v is None else f"{v:8.4f}" for v in ks[f].values()]
        print(f"{f:18s} {vals[0]}  {vals[1]}    {vals[2]}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    dataset = _load_dataset(cfg)
    eps, min_samples = cfgmod.clustering_params(cfg)
    spatial, s_lab, _ = fit_spatial(dataset, eps, min_samples)
    a = cfg["ablation"]
    grid = AblationGrid(tuple(a["windows"]), tuple(a["overlaps"]), tuple(a["n_rollouts"]),
                        tuple(a["rollout_lengths"]), int(a["total_length"]), int(a["samples"]))
    n = cfg["ntpp"]
    train_kwargs = {"epochs": int(a["epochs"]), "lr": float(n["lr"]), "batch_size": int(n["batch_size"]),
                    "patience": int(n["patience"])}
    out = _out(cfg) / "ablation"
    report = run_ablation(dataset, spatial, s_lab, grid, cfg["seed"], PolicySpec("scripted", cfgmod.v_max(cfg)),
                          train_kwargs, _sim_kwargs(cfg), cache_dir=out / "cache", jobs=cfg["jobs"])
    doc = report.to_dict()
    doc["seed"] = cfg["seed"]
    with staged(out / "report") as tmp:
        _dump(tmp / "report.json", doc)
    d = report.direction
    print(f"cells: {len(report.cells)}, samples per cell: {grid.samples}")
    print(f"w={d['short_window']} closer to Poisson-GMM than w={d['long_window']} in "
          f"{d['short_closer_count']}/{grid.samples} samples ({'holds' if d['holds'] else 'does not hold'})")
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    s = cfg["synth"]
    dataset, sidecar = generate_scene(s["scene"], cfg["seed"], s.get("horizon"))
    target = cfgmod.resolve_path(cfg, s["path"]) if s.get("path") else _out(cfg) / "synth" / f"{s['scene']}.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix=".synth-", dir=target.parent) as tmp:
        write_scene(Path(tmp) / target.name, dataset, sidecar)
        for f in sorted(Path(tmp).iterdir()):
            f.replace(target.parent / f.name)
    print(f"frames: {dataset.frame_count}")
    print(f"agents: {dataset.agent_count}")
    print(f"written: {target}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdspawn", description="Learn and replay crowd spawn dynamics.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--jobs", type=int, help="worker processes for training")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("simulate", "evaluate"):
            sp.add_argument("--baseline", choices=["poisson"], help="use the Poisson-GMM baseline")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed, "jobs": args.jobs, "output": args.out}
        cfg = cfgmod.load_config(args.config, overrides)
        if getattr(args, "baseline", None):
            cfg["simulation"]["baseline"] = args.baseline
        cfgmod.validate(cfg, args.command)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, ModelError, EmptySample) as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CrowdSpawnError as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
