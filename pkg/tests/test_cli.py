import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from sfpe_tail.cli import main
from sfpe_tail.config import load_config
from sfpe_tail.io import read_csv_hash

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
seed: 5
model:
  kind: Ruin
  driver: {family: ruin, m_R: 0.2, s_R: 0.4, rate: 1.0, claim_mean: 1.0, premium: 1.2}
regen: {scheme: atom}
compute:
  n_cycles: 4000
  n_tau_cycles: 8000
  n_walks: 8000
  u_grid: [10.0, 100.0]
  validate_paths: 20000
  identity_paths: 500
  min_escapes: 10
  lundberg_u_grid: [1000.0, 10000.0]
  n_x: 20000
  n_w: 5
  n_w_cycles: 200
  n_zbar_cycles: 2000
  n_vbar: 20000
  n_paths: 2000
  n_hits: 500
  qu_u: [50.0, 500.0]
  qu_cycles: 2000
  theorem41_u: [100.0, 1000.0]
%s
"""


def _cfg(tmp_path, extra="", name="c.yaml"):
    p = tmp_path / name
    p.write_text(SMALL % extra)
    return p


def test_solve_xi_prints(capsys):
    assert main(["solve-xi", "--config", str(CONFIGS / "lognormal_xi.yaml")]) == 0
    out = capsys.readouterr().out
    assert "xi = 2.500000000\n" in out
    assert "lambda(xi * 1.1)" in out


def test_solve_xi_arch(capsys):
    from scipy import integrate, stats

    assert main(["solve-xi", "--config", str(CONFIGS / "arch.yaml")]) == 0
    line = capsys.readouterr().out.splitlines()[0]
    xi = float(line.split("=")[1])
    f = lambda x: (0.5 * x) ** xi * stats.chi2.pdf(x, 1)
    val = integrate.quad(f, 0, 1)[0] + integrate.quad(f, 1, float("inf"))[0]
    assert abs(val - 1.0) < 1e-4


def test_solve_xi_no_root(capsys):
    assert main(["solve-xi", "--config", str(CONFIGS / "constant_half.yaml")]) == 2
    assert "NoRoot" in capsys.readouterr().err


def test_estimate_writes_outputs(tmp_path):
    cfg = _cfg(tmp_path)
    out = tmp_path / "run"
    assert main(["estimate", "--config", str(cfg), "--out", str(out), "--workers", "1",
                 "--targets", "C,Cstar,theta,tailcurve"]) == 0
    h = load_config(cfg).hash
    est = json.loads((out / "estimates.json").read_text())
    assert est["config_hash"] == h
    assert {"C", "Cstar", "theta", "tailcurve"} <= set(est["estimates"])
    assert read_csv_hash(out / "tail_curve.csv") == h
    man = json.loads((out / "manifest.json").read_text())
    assert man["exit_code"] == 0 and man["config_hash"] == h


def test_same_seed_same_bytes(tmp_path):
    cfg = _cfg(tmp_path)
    outs = []
    for i, w in enumerate(("1", "4", "1")):
        out = tmp_path / f"r{i}"
        main(["estimate", "--config", str(cfg), "--out", str(out), "--workers", w, "--targets", "C,tailcurve"])
        outs.append(((out / "tail_curve.csv").read_bytes(), (out / "estimates.json").read_bytes()))
    assert outs[0] == outs[1] == outs[2]


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)

    def run(name, *extra):
        out = tmp_path / name
        main(["estimate", "--config", str(cfg), "--out", str(out), "--workers", "1", "--targets", "Cstar", *extra])
        return json.loads((out / "estimates.json").read_text())["seed"]

    assert run("a") == 5
    monkeypatch.setenv("SFPE_SEED", "77")
    assert run("b") == 77
    assert run("c", "--seed", "99") == 99


def test_unwritable_output(tmp_path):
    cfg = _cfg(tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["estimate", "--config", str(cfg), "--out", str(blocker / "sub"), "--targets", "Cstar"]) == 4


def test_estimator_error_exit_3(tmp_path):
    cfg = _cfg(tmp_path, name="bad.yaml")
    cfg.write_text(cfg.read_text().replace("min_escapes: 10", "min_escapes: 100000000"))
    out = tmp_path / "o"
    assert main(["estimate", "--config", str(cfg), "--out", str(out), "--workers", "1", "--targets", "C,Cstar"]) == 3
    est = json.loads((out / "estimates.json").read_text())["estimates"]
    assert est["C"]["failed"] is True
    assert "value" in est["Cstar"]


def test_validate_passes_and_negative_control(tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path / "v"), "--workers", "1"]) == 0
    bad = _cfg(tmp_path, "  tilt_offset: 0.1\n", "neg.yaml")
    bad.write_text(bad.read_text().replace("validate_paths: 20000", "validate_paths: 100000"))
    out = tmp_path / "v2"
    assert main(["validate", "--config", str(bad), "--out", str(out), "--workers", "1"]) == 5
    checks = {c["check"]: c for c in json.loads((out / "validate.json").read_text())["checks"]}
    assert checks["change_of_measure"]["passed"] is False


def test_validate_zero_cycles(tmp_path):
    cfg = _cfg(tmp_path)
    cfg.write_text(cfg.read_text().replace("validate_paths: 20000", "validate_paths: 0"))
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path / "z"), "--workers", "1"]) == 3


def test_dump_paths(tmp_path):
    cfg = _cfg(tmp_path)
    out = tmp_path / "d"
    main(["estimate", "--config", str(cfg), "--out", str(out), "--workers", "1", "--targets", "Cstar", "--dump-paths"])
    lines = (out / "paths.csv").read_text().splitlines()
    assert lines[1] == "measure,cycle,n,V,S,logA,B,D"


@pytest.mark.parametrize("cmd", ["extremal-index", "tail-curve", "lundberg", "renewal-checks"])
def test_other_subcommands(tmp_path, cmd):
    cfg = _cfg(tmp_path)
    assert main([cmd, "--config", str(cfg), "--out", str(tmp_path / cmd), "--workers", "1"]) == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "sfpe_tail", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "sfpe" in r.stdout
