import json
import os
import subprocess
import sys

import pytest

from coopgait.cli import EXIT_INPUT, EXIT_USAGE, main


def run_cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "coopgait.cli", *args], capture_output=True,
                          text=True, env={**os.environ, **(env or {})})


def test_product_graph_counts(capsys):
    assert main(["--mode", "product-graph", "--cycle", "8"]) == 0
    assert capsys.readouterr().out.strip() == "64 vertices, 192 edges"


def test_product_graph_json(tmp_path):
    assert main(["--mode", "product-graph", "--cycle", "3", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "product_graph.json").read_text())
    assert len(doc["vertices"]) == 9 and len(doc["edges"]) == 27


def test_missing_model_gives_error_record(tmp_path, capsys):
    code = main(["--mode", "single", "--model", str(tmp_path / "nope.yaml"),
                 "--out", str(tmp_path)])
    assert code == EXIT_INPUT
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"] == "file-error" and rec["exit_code"] == EXIT_INPUT
    assert json.loads((tmp_path / "error.json").read_text()) == rec


def test_malformed_params_file(tmp_path, capsys):
    bad = tmp_path / "p.yaml"
    bad.write_text("alpha: [1, 2\n")
    assert main(["--mode", "single", "--params", str(bad)]) == EXIT_INPUT
    assert "parameter file" in json.loads(capsys.readouterr().err.strip())["message"]


def test_usage_errors(capsys):
    assert main(["--mode", "coupled", "--d", "0,0"]) == EXIT_USAGE
    assert json.loads(capsys.readouterr().err.strip())["error"] == "usage"
    assert main(["--mode", "single", "--strides", "0"]) == EXIT_USAGE
    assert main(["--mode", "nonsense"]) == 2


def test_single_run_is_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        r = run_cli("--mode", "single", "--strides", "1", "--perturb", "random:1e-3",
                    "--seed", "3", "--out", str(d))
        assert r.returncode == 0, r.stderr
        outs.append(d)
    for name in ("trajectory.csv", "events.json", "audit.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    events = json.loads((outs[0] / "events.json").read_text())
    assert events["meta"]["seed"] == 3
    assert len(events["events"]) == 8


def test_named_perturbation_is_recorded(tmp_path):
    assert main(["--mode", "single", "--perturb", "v1_1:1e-3", "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "events.json").read_text())["meta"]
    assert meta["perturbation"] == {"coordinate": "v1_1", "magnitude": 0.001}


def test_log_level_from_environment():
    r = run_cli("--mode", "product-graph", "--cycle", "2", env={"COOPGAIT_LOG": "DEBUG"})
    assert r.returncode == 0 and r.stdout.strip() == "4 vertices, 12 edges"


@pytest.mark.parametrize("flag", ["--d", "--perturb"])
def test_bad_flag_values(flag):
    assert main(["--mode", "single", flag, "garbage"]) == 2
