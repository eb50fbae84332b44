import json
import math

import numpy as np
import pytest
import yaml

from sfpe_tail.config import COMPUTE_DEFAULTS, RunConfig, load_config, parse_config
from sfpe_tail.errors import ConfigError, OutputError
from sfpe_tail.io import ensure_dir, read_csv_hash, to_json, write_csv, write_json
from sfpe_tail.rng import fnv1a64

BASE = """
seed: 9
output: out/x
model:
  kind: Ruin
  driver: {family: ruin, m_R: 0.2, s_R: 0.4, rate: 1.0, claim_mean: 1.0, premium: 1.2}
regen: {scheme: atom}
compute: {n_cycles: 100}
"""


def test_defaults_filled():
    cfg = parse_config(BASE)
    assert cfg.compute["n_cycles"] == 100
    assert cfg.compute["n_walks"] == COMPUTE_DEFAULTS["n_walks"]


def test_round_trip():
    cfg = parse_config(BASE)
    again = parse_config(cfg.dumps())
    assert again.to_dict() == cfg.to_dict()
    assert again.hash == cfg.hash


def test_hash_ignores_output_only():
    a = parse_config(BASE)
    b = parse_config(BASE.replace("out/x", "elsewhere"))
    c = parse_config(BASE.replace("seed: 9", "seed: 10"))
    assert a.hash == b.hash != c.hash
    assert a.hash == f"{fnv1a64(a.canonical()):016x}"


def test_fnv_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


@pytest.mark.parametrize("text", [
    "model: {kind: Ruin}",
    BASE + "extra: 1\n",
    BASE.replace("n_cycles: 100", "n_cycle: 100"),
    BASE.replace("n_cycles: 100", "t: 1.5"),
    BASE.replace("n_cycles: 100", "targets: [C, nope]"),
    BASE.replace("seed: 9", "seed: -1"),
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_build_model():
    cfg = parse_config(BASE)
    m = cfg.build_model()
    assert m.kind == "Ruin"
    assert cfg.build_regen(m).kind == "atom"


def test_json_deterministic_floats():
    s = to_json({"b": 0.1, "a": [1, math.inf, np.float64(2.5)], "c": None})
    d = json.loads(s)
    assert list(d) == ["a", "b", "c"]
    assert d["a"] == [1, None, 2.5]
    assert "0.10000000000000001" in s


def test_files_carry_hash(tmp_path):
    write_json(tmp_path / "a.json", {"x": 1.0}, "abc")
    write_csv(tmp_path / "a.csv", [{"u": 1.0, "p": 0.1}], ["u", "p"], "abc")
    assert json.loads((tmp_path / "a.json").read_text())["config_hash"] == "abc"
    assert read_csv_hash(tmp_path / "a.csv") == "abc"
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[1:] == ["u,p", "1.0,0.1"]


def test_ensure_dir_errors(tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    assert ensure_dir(tmp_path / "new" / "dir").is_dir()
    with pytest.raises(OutputError):
        ensure_dir(f / "sub")


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.yaml"))
    assert files
    for p in files:
        cfg = load_config(p)
        cfg.build_model()
        assert yaml.safe_load(cfg.dumps())["seed"] == cfg.seed
