import csv
import json

import pytest

from stochlag import cli
from stochlag.io import table_body

FAST = """
[run]
seed = 3
[grid]
N = 16
[sln]
nu = 0.5
M = 64
T = 0.004
[sweep]
M = 32
T = 2e-5
[validate]
M = 64
"""


@pytest.fixture
def fast_config(tmp_path):
    p = tmp_path / "fast.ini"
    p.write_text(FAST)
    return p


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_validate_default_config(tmp_path, capsys):
    assert cli.main(["validate", "--out", str(tmp_path / "v")]) == 0
    table = rows(tmp_path / "v" / "validate.csv")
    assert table[0] == ["check", "value", "tolerance", "status"]
    assert all(r[3] == "pass" for r in table[2:]) and len(table) > 10
    out = capsys.readouterr().out
    assert "FAIL" not in out


def test_sweep_outputs(tmp_path, fast_config):
    out = tmp_path / "s"
    assert cli.main(["norm-decay-sweep", "--config", str(fast_config), "--out", str(out)]) == 0
    table = rows(out / "norm_decay_sweep.csv")
    assert len(table) == 2 + 4 and table[0][0] == "R"
    summary = json.loads((out / "norm_decay_summary.json").read_text())
    assert summary["expected_slope"] == pytest.approx(2 / 3)


def test_missing_viscosity_and_reynolds(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[sln]\nM = 16\n")
    assert cli.main(["sln-solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "exclusive-or" in capsys.readouterr().err


@pytest.mark.parametrize("text,needle", [
    ("[grid]\nN = many\n", ":2: field [grid] N"),
    ("[grid]\nd = 2\ncolour = red\n", ":3: unknown field [grid] colour"),
    ("[nonsense]\nx = 1\n", "unknown section [nonsense]"),
    ("no header\n", "malformed config"),
])
def test_config_diagnostics(tmp_path, capsys, text, needle):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    assert cli.main(["validate", "--config", str(cfg)]) == 2
    assert needle in capsys.readouterr().err


def test_usage_errors(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["validate", "--threads", "0"]) == 2
    assert cli.main(["validate", "--config", "/nonexistent/x.ini"]) == 2


def test_window_guard_is_reported(tmp_path, capsys):
    cfg = tmp_path / "w.ini"
    cfg.write_text("[sln]\nnu = 0.5\nwindow = 0.1\nT = 0.1\n")
    assert cli.main(["sln-solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "delta_num" in capsys.readouterr().err


def test_output_root_env_and_manifest_replay(tmp_path, monkeypatch, fast_config):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["sln-solve", "--config", str(fast_config), "--seed-override", "9",
                     "--cross-check-routes"]) == 0
    (run,) = (tmp_path / "root").iterdir()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["cross_check_routes"]
    assert {o["path"] for o in manifest["outputs"]} >= {"sln_trace.csv", "sln_summary.json"}
    assert manifest["wiener"]["windows"][0]["checksum"]
    assert manifest["environment"]["numpy"]
    # replaying the manifest (seed and flags included) reproduces the trace bit for bit
    replay = tmp_path / "replay"
    assert cli.main(["sln-solve", "--config", str(run / "manifest.json"),
                     "--out", str(replay)]) == 0
    assert (replay / "sln_trace.csv").read_bytes() == (run / "sln_trace.csv").read_bytes()
    assert table_body(replay / "sln_trace.csv") == table_body(run / "sln_trace.csv")


def test_heat_decay_runs(tmp_path):
    cfg = tmp_path / "h.ini"
    cfg.write_text("[grid]\nN = 16\n[heat]\nM = 64\ntimes = 0.1, 0.2\noracle_dt = 0.01\n")
    assert cli.main(["heat-decay", "--config", str(cfg), "--out", str(tmp_path / "h")]) == 0
    assert len(rows(tmp_path / "h" / "heat_decay.csv")) == 4
