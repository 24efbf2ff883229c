import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
import yaml

from seslease.cli import RESULT_FIELDS, main


def desk_config(tmp_path, **edits):
    d = yaml.safe_load((resources.files("seslease") / "scenarios" / "desk2.yaml").read_text())
    for path, value in edits.items():
        node = d
        keys = path.split(".")
        for k in keys[:-1]:
            node = node[int(k)] if isinstance(node, list) else node[k]
        node[keys[-1] if not isinstance(node, list) else int(keys[-1])] = value
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d))
    return str(p)


def read_results(out):
    with open(Path(out) / "results.csv") as fh:
        return list(csv.DictReader(fh))


def read_nsor(out):
    with open(Path(out) / "nsor.csv") as fh:
        first = fh.readline()
        assert "negative = demand" in first
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("mode", ["centralized", "mode1", "no-ses", "duet", "mode2"])
def test_modes_write_reports(tmp_path, mode, capsys):
    out = tmp_path / mode
    assert main(["run", "--mode", mode, "--config", "desk2", "--out", str(out), "--mc-samples", "200"]) == 0
    text = capsys.readouterr().out
    for f in ("results.csv", "nsor.csv", "mc_report.json", "summary.txt"):
        assert (out / f).is_file()
    if mode in ("mode1", "mode2", "duet"):
        assert (out / "iterations.csv").is_file()
    if mode == "duet":
        assert (out / "transcript.txt").is_file()
    if mode == "mode2":
        assert (out / "training_trace.csv").is_file() and (out / "surrogate.txt").is_file()
    assert "negative = demand" in text
    row = read_results(out)[0]
    assert list(row) == RESULT_FIELDS
    mc = json.loads((out / "mc_report.json").read_text())
    assert mc["samples"] == 200 and mc["violations"] == 0
    for r in read_nsor(out):
        assert r["inside"] == "True"


def test_gap_printed(tmp_path, capsys):
    assert main(["run", "--mode", "mode1", "--config", "desk2", "--out", str(tmp_path)]) == 0
    line = [l for l in capsys.readouterr().out.splitlines() if "gap" in l][0]
    assert float(line.split("gap")[1].split("%")[0]) <= 0.1


def test_profits_reconcile(tmp_path):
    main(["run", "--mode", "mode1", "--config", "desk2", "--out", str(tmp_path)])
    r = {k: float(v) for k, v in read_results(tmp_path)[0].items() if k not in ("case", "mode")}
    lhs = r["profit_aggregator"] + r["profit_utility"]
    rhs = -r["objective"] + r["lease_fees"] + r["lease_om"]
    assert abs(lhs - rhs) <= 1e-6


def test_ses_improves_aggregator_profit(tmp_path):
    main(["run", "--mode", "mode1", "--config", "desk2", "--out", str(tmp_path / "a")])
    main(["run", "--mode", "no-ses", "--config", "desk2", "--out", str(tmp_path / "b")])
    with_ses = float(read_results(tmp_path / "a")[0]["profit_aggregator"])
    without = float(read_results(tmp_path / "b")[0]["profit_aggregator"])
    assert with_ses >= without - 1e-6


def test_ses_run_has_negative_nsor_bound(tmp_path):
    main(["run", "--mode", "mode1", "--config", "desk2", "--out", str(tmp_path)])
    assert any(float(r["nsor_min"]) < 0 for r in read_nsor(tmp_path))


def test_zero_der_gives_zero_table(tmp_path):
    cfg = desk_config(tmp_path, **{"aggregator.units": [{"kind": "dg", "bus": 2, "p_max": 0}]})
    assert main(["run", "--mode", "no-ses", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    for r in read_nsor(tmp_path / "o"):
        assert abs(float(r["nsor_min"])) <= 1e-9 and abs(float(r["nsor_max"])) <= 1e-9
        assert abs(float(r["awarded"])) <= 1e-9


def test_outputs_deterministic(tmp_path):
    for d in ("a", "b"):
        main(["run", "--mode", "mode1", "--config", "desk2", "--seed", "3", "--out", str(tmp_path / d)])
    for f in ("results.csv", "nsor.csv", "iterations.csv", "mc_report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_invalid_config_names_field(tmp_path, capsys):
    cfg = desk_config(tmp_path, **{"ses.eta_c": -0.5})
    assert main(["run", "--mode", "mode1", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "ses.eta_c" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2
    assert "config" in capsys.readouterr().err


def test_nonconvergence_exit(tmp_path, capsys):
    cfg = desk_config(tmp_path, **{"admm": {"rho": 0.01, "eps_pri": 1e-4, "eps_dual": 1e-4, "k_max": 2}})
    assert main(["run", "--mode", "mode1", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "non-convergence" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["centralized", "mode1"])
def test_infeasible_exit_names_family(tmp_path, capsys, mode):
    cfg = desk_config(tmp_path, **{"network.branches.0.r": 5.0})
    assert main(["run", "--mode", mode, "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "infeasible" in err and err.strip().endswith("families: security")


def test_list(capsys):
    assert main(["list"]) == 0
    assert capsys.readouterr().out.split() == ["case69", "desk2"]
