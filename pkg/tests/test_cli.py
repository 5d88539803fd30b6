from __future__ import annotations

import json
from pathlib import Path

import pytest

from phasezoo.cli import EXIT_CONFIG, EXIT_CONTRACT, EXIT_INCOMPLETE, EXIT_OK, main

TINY_CONFIG = {
    "grid": {"widths": [3, 5], "batch_sizes": [8, 16], "seeds": [0, 1],
             "model": {"input_dim": 2, "num_hidden_layers": 1, "output_dim": 3},
             "train": {"epochs": 3, "peak_lr": 0.05, "checkpoint_every": 1},
             "dataset": {"n_train": 48, "n_test": 48, "noise": 0.2}},
    "metrics": {"probes": 4, "power_iters": 8, "bezier_steps": 10, "t_grid_size": 5},
    "hpo": {"trials": 10},
}


def _write(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    lines = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(lines[-1])


def test_plan_for_full_desk_grid(tmp_path, capsys):
    cfg = {"grid": {"widths": [4, 6, 8, 12, 16, 24, 32, 64], "batch_sizes": [2, 3, 4, 6, 8, 12, 16, 32],
                    "seeds": [0, 1, 2]}}
    code = main(["--zoo", str(tmp_path / "zoo"), "--config", _write(tmp_path, cfg), "zoo", "plan"])
    out = capsys.readouterr().out
    assert code == EXIT_OK and out.startswith("192 cells planned")


@pytest.mark.parametrize("name,cells", [("desk.json", 75), ("probe.json", 192)])
def test_shipped_configs_plan(tmp_path, capsys, name, cells):
    config = Path(__file__).resolve().parents[1] / "configs" / name
    code, summary = _run(capsys, "--zoo", str(tmp_path / "zoo"), "--config", str(config), "zoo", "plan")
    assert code == EXIT_OK and summary["cells"] == cells


def test_unknown_key_names_path(tmp_path, capsys):
    bad = json.loads(json.dumps(TINY_CONFIG))
    bad["grid"]["train"]["epochz"] = 3
    code, summary = _run(capsys, "--zoo", str(tmp_path / "zoo"), "--config", _write(tmp_path, bad), "zoo", "plan")
    assert code == EXIT_CONFIG and summary["key"] == "grid.train.epochz"


def test_invalid_json_is_config_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    code, summary = _run(capsys, "--zoo", str(tmp_path / "zoo"), "--config", str(path), "zoo", "plan")
    assert code == EXIT_CONFIG and summary["key"] == "--config"


def test_missing_zoo_is_incomplete(tmp_path, capsys):
    code, summary = _run(capsys, "--zoo", str(tmp_path / "nowhere"), "metrics", "compute")
    assert code == EXIT_INCOMPLETE and summary["status"] == "incomplete"


def test_full_pipeline(tmp_path, capsys):
    zoo = tmp_path / "zoo"
    cfg = _write(tmp_path, TINY_CONFIG)
    base = ["--zoo", str(zoo), "--config", cfg]
    assert _run(capsys, *base, "zoo", "plan")[0] == EXIT_OK
    code, summary = _run(capsys, *base, "zoo", "run", "--limit", "3")
    assert code == EXIT_OK
    # a partially trained zoo is refused by every analysis step, naming the pending cells
    code, summary = _run(capsys, *base, "metrics", "compute")
    assert code == EXIT_INCOMPLETE and len(summary["cells"]) == 5
    assert _run(capsys, *base, "zoo", "run")[0] == EXIT_OK
    assert _run(capsys, *base, "metrics", "compute")[0] == EXIT_OK
    assert _run(capsys, *base, "phase", "fit")[0] == EXIT_OK
    assert (zoo / "phase_thresholds.json").exists()
    assert _run(capsys, *base, "phase", "classify")[0] == EXIT_OK
    assert (zoo / "grids" / "phase.csv").exists()
    code, summary = _run(capsys, *base, "hpo", "run")
    assert code == EXIT_OK and (zoo / "hpo_report.json").exists()
    code, _ = _run(capsys, *base, "downstream", "prune", "--option", "sparsity=0.25")
    assert code == EXIT_OK and (zoo / "downstream" / "prune.csv").exists()
    assert _run(capsys, *base, "export", "grid", "--all")[0] == EXIT_OK
    names = sorted(p.name for p in (zoo / "grids").glob("*.csv"))
    for field in ("train_loss", "test_acc", "ggap", "lambda_max", "trace", "mc", "cka"):
        assert f"{field}.csv" in names
    # four configurations are fewer than the probe minimum
    code, summary = _run(capsys, *base, "probe", "run")
    assert code == EXIT_CONTRACT and "at least" in summary["error"]

    provenance = (zoo / "provenance.json").read_bytes()
    assert _run(capsys, *base, "export", "grid", "--all")[0] == EXIT_OK
    assert (zoo / "provenance.json").read_bytes() == provenance
    recorded = json.loads(provenance)["commands"]
    assert {"zoo run", "metrics compute", "phase fit", "export grid"} <= set(recorded)


@pytest.mark.parametrize("argv", [["--workers", "0", "zoo", "plan"], ["phase", "classify"]])
def test_argument_errors(tmp_path, capsys, argv):
    code, _ = _run(capsys, "--zoo", str(tmp_path / "zoo"), *argv)
    assert code in (EXIT_CONFIG, EXIT_INCOMPLETE)
