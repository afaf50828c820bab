import json
import subprocess
import sys

import pytest
import yaml

from ddswarm import experiments as ex
from ddswarm.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


def write_config(tmp_path, **kw):
    raw = {"scenario": "gaussian_dispersion", "grid": {"n_cells": 32}, "snapshots": 2}
    raw.update(kw)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    assert all(name in out for name in ex.SCENARIOS)


def test_validate_ok_and_invalid(tmp_path, capsys):
    assert main(["validate", "double_well"]) == EXIT_OK
    assert "ok: double_well" in capsys.readouterr().out
    assert main(["validate", str(write_config(tmp_path, dds={"reach": 3.0}))]) == EXIT_INVALID
    assert "reach" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario: [unclosed")
    assert main(["validate", str(bad)]) == EXIT_INVALID
    assert main(["validate", str(tmp_path / "missing.yaml")]) == EXIT_INVALID


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["run", "x", "--seed", "notanint"]) == EXIT_USAGE


def test_run_and_compare(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["run", str(cfg), "--out-dir", str(out), "--seed", "3", "--snapshots", "3"]) == EXIT_OK
    run_dir = capsys.readouterr().out.splitlines()[0]
    manifest = json.loads((out / run_dir.split("/")[-1] / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["snapshot_times"]) == 4
    table = tmp_path / "cmp.csv"
    assert main(["compare", run_dir, run_dir, "--out", str(table)]) == EXIT_OK
    assert '"final_l1": 0.0' in capsys.readouterr().out and table.exists()


def test_runtime_failures(tmp_path, monkeypatch, capsys):
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == EXIT_RUNTIME

    def broken(sw, v):
        raise FloatingPointError("boom")

    monkeypatch.setattr(ex, "dds_step", broken)
    assert main(["run", str(write_config(tmp_path)), "--out-dir", str(tmp_path)]) == EXIT_RUNTIME
    assert "manifest" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ddswarm.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "ddswarm" in proc.stdout
