import json

import pandas as pd
import pytest
import yaml

from conftest import write_hand
from zoneforge.cli import main
from zoneforge.config import RunConfig
from zoneforge.errors import ValidationError


def _write(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


def _hand_config(tmp_path, **extra):
    write_hand(tmp_path / "geo")
    cfg = {"output": "out", "inputs": {"geography": "geo"}, "delineate": {"stage1_regions": 4}}
    cfg.update(extra)
    return _write(tmp_path / "run.yaml", cfg)


def test_config_defaults_and_resolution(tmp_path):
    path = _write(tmp_path / "c.yaml", {"seed": 3, "output": "res"})
    cfg = RunConfig.load(path)
    assert cfg.out == tmp_path / "res"
    assert cfg.delineate.stage1_list(100) == [60]
    assert cfg.estimate.estimators == ["ols", "tsls"] and cfg.estimate.B == 499
    assert cfg.world.dgp_config(3).n_municipalities == 360


@pytest.mark.parametrize("raw, match", [
    ({"typo": 1}, "unknown key"),
    ({"estimate": {"B": 1}}, "B"),
    ({"estimate": {"outcomes": ["wages"]}}, "outcomes"),
    ({"estimate": {"estimators": ["gmm"]}}, "estimators"),
    ({"estimate": {"window": ["2010Q1", "2009Q1"]}}, "empty"),
    ({"delineate": {"stop": {"threshold": 0.9, "count": 3}}}, "stop"),
    ({"overlap": {"criterion": "strict"}}, "unknown criterion|strict"),
    ({"panel": {"subgroups": ["height"]}}, "subgroups"),
    ({"seed": -4}, "seed"),
    ({"world": {"preset": "huge"}}, None),
])
def test_config_rejects(tmp_path, raw, match):
    path = _write(tmp_path / "c.yaml", raw)
    with pytest.raises(ValidationError, match=match):
        cfg = RunConfig.load(path)
        cfg.world.dgp_config(0)


def test_missing_config_file(tmp_path, capsys):
    assert main(["delineate", "--config", str(tmp_path / "none.yaml")]) == 1
    assert "config file not found" in capsys.readouterr().err


def test_missing_flows_exit_1(tmp_path, capsys):
    path = _hand_config(tmp_path)
    (tmp_path / "geo" / "flows.csv").unlink()
    assert main(["delineate", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    assert "flows.csv" in err and err.startswith("zoneforge delineate: error:")


def test_numerical_failure_exit_2(tmp_path, capsys):
    # two disconnected blocks cannot be merged into a single stage-1 region
    path = _hand_config(tmp_path, delineate={"stage1_regions": 1},
                        inputs={"geography": "geo", "adjacency_seconds": 700})
    assert main(["delineate", "--config", str(path)]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_simulate_needs_seed(tmp_path, capsys):
    path = _write(tmp_path / "c.yaml", {"output": "o"})
    assert main(["simulate", "--config", str(path)]) == 1
    assert "seed" in capsys.readouterr().err


def test_hand_delineate_and_overlap(tmp_path):
    path = _hand_config(tmp_path)
    assert main(["delineate", "--config", str(path)]) == 0
    part = pd.read_csv(tmp_path / "out" / "delineate" / "partition.csv")
    assert part["region_id"].tolist() == ["M001", "M001", "M002", "M002"]
    metrics = json.loads((tmp_path / "out" / "delineate" / "metrics.json").read_text())
    assert metrics["n_markets"] == 2
    assert main(["overlap", "--config", str(path)]) == 0
    sel = json.loads((tmp_path / "out" / "overlap" / "selection.json").read_text())
    assert sel["kept"] == []  # agencies follow the markets exactly, so no instrument area
    assert main(["build-panel", "--config", str(path)]) == 1


def test_pipeline_small_world(tmp_path):
    cfg = {
        "seed": 7, "output": "out",
        "world": {"preset": "default", "micro": False},
        "delineate": {"stage1_regions": 360, "table_stops": [0.95]},
        "estimate": {"outcomes": ["unemployment"], "estimators": ["ols", "tsls", "dl"], "B": 12,
                     "horizon": 4},
    }
    path = _write(tmp_path / "run.yaml", cfg)
    for cmd in ("simulate", "delineate", "overlap", "build-panel", "estimate", "report"):
        assert main([cmd, "--config", str(path)]) == 0, cmd
    out = tmp_path / "out"
    assert (out / "world" / "counts.csv").exists() and not (out / "world" / "micro.csv").exists()
    panel = pd.read_csv(out / "panel" / "panel.csv")
    kept = json.loads((out / "overlap" / "selection.json").read_text())["kept"]
    assert sorted(panel["market"].unique()) == sorted(kept)
    for est in ("ols", "tsls", "dl"):
        root = out / "estimate" / "unemployment" / est
        assert (root / "fit.json").exists() and (root / "bootstrap.json").exists()
        assert (root / "firststage.json").exists() == (est != "ols")
    fit_dl = json.loads((out / "estimate" / "unemployment" / "dl" / "fit.json").read_text())
    assert fit_dl["theta"] is None
    eff = pd.read_csv(out / "report" / "cumulative_effects.csv")
    assert list(eff.columns) == ["outcome", "estimator", "program", "horizon", "cumulative", "se",
                                 "ci_low", "ci_high"]
    assert len(eff) == 3 * 3 * 5
    summary = (out / "report" / "summary.txt").read_text()
    assert "training lt" in summary and "theta" in summary


def test_out_override(tmp_path):
    path = _hand_config(tmp_path)
    assert main(["delineate", "--config", str(path), "--out", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "delineate" / "partition.csv").exists()
