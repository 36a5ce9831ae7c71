import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from crowdspawn import config as cfgmod
from crowdspawn.cli import main
from crowdspawn.errors import ConfigError


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("preset, eps, ms", [("gc", 0.2, 20), ("forum", 2.0, 5), ("eth", 0.8, 3)])
def test_clustering_presets(preset, eps, ms):
    cfg = cfgmod.load_config(None, {"dataset": {"preset": preset}}, environ={})
    assert cfgmod.clustering_params(cfg) == (eps, ms)


def test_explicit_clustering_beats_preset():
    cfg = cfgmod.load_config(None, {"dataset": {"preset": "gc"}, "clustering": {"eps": 0.7}}, environ={})
    assert cfgmod.clustering_params(cfg) == (0.7, 20)


def test_clustering_needs_values():
    cfg = cfgmod.load_config(None, environ={})
    with pytest.raises(ConfigError):
        cfgmod.clustering_params(cfg)


def test_defaults_match_published_training_setup():
    cfg = cfgmod.load_config(None, environ={})
    assert cfg["ntpp"]["epochs"] == 500 and cfg["ntpp"]["lr"] == 1e-4
    assert cfg["policy"]["bc_epochs"] == 1000 and cfg["policy"]["bc_lr"] == 1e-4
    assert cfgmod.v_max(cfg) == pytest.approx(0.6)


def test_precedence_defaults_file_env_flags(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"seed": 1, "ntpp": {"window": 300, "overlap": 30}}))
    env = {"CROWDSPAWN_NTPP__WINDOW": "400", "CROWDSPAWN_SEED": "2", "UNRELATED": "x"}
    cfg = cfgmod.load_config(p, {"seed": 3, "jobs": None}, environ=env)
    assert cfg["seed"] == 3  # flag beats env beats file
    assert cfg["ntpp"]["window"] == 400  # env beats file
    assert cfg["ntpp"]["overlap"] == 30  # file beats default
    assert cfg["ntpp"]["epochs"] == 500  # default
    assert cfg["jobs"] == 1  # a None flag does not override


def test_unknown_section_rejected(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("nttp: {window: 3}\n")
    with pytest.raises(ConfigError):
        cfgmod.load_config(p, environ={})


@pytest.mark.parametrize("command, override", [
    ("simulate", {"seed": -1}),
    ("fit", {"ntpp": {"window": 100, "overlap": 100}}),
    ("fit", {"ntpp": {"epochs": 501}}),
    ("fit", {"ntpp": {"lr": 0}}),
    ("simulate", {"sampling": {"n_rollouts": 0}}),
    ("simulate", {"simulation": {"baseline": "hawkes"}}),
    ("ablate", {"ablation": {"windows": [100, 5]}}),
])
def test_validation_rejects(tmp_path, command, override):
    (tmp_path / "d.csv").write_text("frame,agent_id,x,y\n0,0,0,0\n1,0,1,0\n")
    base = {"dataset": {"path": str(tmp_path / "d.csv"), "preset": "eth"}}
    cfg = cfgmod.load_config(None, cfgmod._merge(base, override), environ={})
    cfgmod.validate(cfgmod.load_config(None, base, environ={}), command)  # the base is fine
    with pytest.raises(ConfigError):
        cfgmod.validate(cfg, command)


def test_validation_needs_existing_dataset(tmp_path):
    cfg = cfgmod.load_config(None, {"dataset": {"path": str(tmp_path / "nope.csv")}}, environ={})
    with pytest.raises(ConfigError):
        cfgmod.validate(cfg, "ingest")


# -- CLI -------------------------------------------------------------------------


def write_config(tmp_path, **sections):
    doc = {"output": str(tmp_path / "out"), "seed": 0}
    for k, v in sections.items():
        doc[k] = v
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(doc))
    return p


def small_pipeline_config(tmp_path, horizon=1500):
    return write_config(
        tmp_path,
        dataset={"path": str(tmp_path / "scene.csv"), "preset": "synthetic"},
        synth={"scene": "poisson", "horizon": horizon, "path": str(tmp_path / "scene.csv")},
        ntpp={"window": 200, "overlap": 20, "epochs": 3},
        sampling={"length": 1000},
        policy={"v_max": 0.5},
    )


@pytest.fixture
def pipeline(tmp_path):
    cfg = small_pipeline_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    return cfg


def test_ingest_reports_and_is_idempotent(pipeline, tmp_path, capsys):
    assert main(["ingest", "--config", str(pipeline)]) == 0
    out = capsys.readouterr().out
    assert "frames: " in out and "agents: " in out
    first = (tmp_path / "out" / "ingest" / "dataset.csv").read_bytes()
    assert main(["ingest", "--config", str(pipeline)]) == 0
    assert (tmp_path / "out" / "ingest" / "dataset.csv").read_bytes() == first


def test_empty_file_exit_3(tmp_path, capsys):
    (tmp_path / "empty.csv").write_text("frame,agent_id,x,y\n")
    cfg = write_config(tmp_path, dataset={"path": str(tmp_path / "empty.csv")})
    assert main(["ingest", "--config", str(cfg)]) == 3
    assert "EmptyDataset" in capsys.readouterr().err
    assert not (tmp_path / "out" / "ingest").exists()


def test_bad_config_exit_2_without_outputs(pipeline, tmp_path):
    assert main(["fit", "--config", str(pipeline), "--seed", "-1"]) == 2
    assert not (tmp_path / "out" / "models").exists()


def test_simulate_without_models_exit_2(pipeline):
    assert main(["simulate", "--config", str(pipeline)]) == 2


def test_fit_manifest_byte_identical(pipeline, tmp_path):
    assert main(["fit", "--config", str(pipeline)]) == 0
    models = tmp_path / "out" / "models"
    first = {p.name: p.read_bytes() for p in models.iterdir()}
    manifest = json.loads(first["manifest.json"])
    assert manifest["seed"] == 0 and manifest["clustering"] == {"eps": 1.0, "min_samples": 5}
    assert all(e["ntpp"] for e in manifest["spawns"])
    assert main(["fit", "--config", str(pipeline)]) == 0
    assert {p.name: p.read_bytes() for p in models.iterdir()} == first


def test_simulate_and_baseline(pipeline, tmp_path, capsys):
    assert main(["fit", "--config", str(pipeline)]) == 0
    assert main(["simulate", "--config", str(pipeline)]) == 0
    assert "conservation: ok" in capsys.readouterr().out
    assert main(["simulate", "--config", str(pipeline), "--baseline", "poisson"]) == 0
    a = (tmp_path / "out" / "simulate" / "log.csv").read_bytes()
    b = (tmp_path / "out" / "simulate-poisson" / "log.csv").read_bytes()
    assert a != b
    man = json.loads((tmp_path / "out" / "simulate-poisson" / "manifest.json").read_text())
    assert man["baseline"] == "poisson" and man["seed"] == 0
    assert main(["simulate", "--config", str(pipeline)]) == 0
    assert (tmp_path / "out" / "simulate" / "log.csv").read_bytes() == a


def test_evaluate_outputs(pipeline, tmp_path):
    assert main(["fit", "--config", str(pipeline)]) == 0
    assert main(["evaluate", "--config", str(pipeline)]) == 0
    ev = tmp_path / "out" / "evaluate"
    for name in ("agents_per_frame.csv", "inter_spawn_times.csv", "spawns_per_window.csv", "time_in_scene.csv",
                 "ks.csv", "report.json", "flows_gt/index.json"):
        assert (ev / name).exists(), name
    ks = (ev / "ks.csv").read_text().splitlines()
    assert ks[0] == "statistic,gt_vs_ntpp_gmm,gt_vs_poisson_gmm,ntpp_gmm_vs_poisson_gmm"
    assert len(ks) == 5
    report = json.loads((ev / "report.json").read_text())
    assert report["agents"]["gt"] > 0


def test_env_override_reaches_cli(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("CROWDSPAWN_NTPP__OVERLAP", "500")  # overlap >= window
    assert main(["fit", "--config", str(pipeline)]) == 2


def test_synth_sidecar(pipeline, tmp_path):
    side = json.loads((tmp_path / "scene.truth.json").read_text())
    assert side["planted"][0]["process"]["rate"] == 0.05
    assert side["spec"]["horizon"] == 1500


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "crowdspawn.cli", "--help"], capture_output=True, text=True,
                       env={**os.environ, "PYTHONWARNINGS": "ignore"})
    assert r.returncode == 0
    for name in ("ingest", "fit", "simulate", "evaluate", "ablate", "synth"):
        assert name in r.stdout


def test_ablate_small_grid(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        dataset={"path": str(tmp_path / "scene.csv"), "preset": "synthetic"},
        synth={"scene": "poisson", "horizon": 1200, "path": str(tmp_path / "scene.csv")},
        ablation={"windows": [50, 200], "overlaps": [5], "n_rollouts": [1], "rollout_lengths": [300],
                  "total_length": 600, "samples": 2, "epochs": 2},
        policy={"v_max": 0.5},
    )
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["ablate", "--config", str(cfg)]) == 0
    rep = tmp_path / "out" / "ablation" / "report" / "report.json"
    first = rep.read_bytes()
    doc = json.loads(first)
    assert len(doc["cells"]) == 2 and all(len(c["samples"]) == 2 for c in doc["cells"])
    # drop one finished cell: the rerun recomputes only it and matches byte for byte
    cells = sorted((tmp_path / "out" / "ablation" / "cache" / "cells").iterdir())
    cells[0].unlink()
    assert main(["ablate", "--config", str(cfg)]) == 0
    assert rep.read_bytes() == first
    assert "samples per cell: 2" in capsys.readouterr().out
    np.testing.assert_equal(doc["seed"], 0)
