"""Run configuration: a YAML tree with documented defaults.

Layout::

    seed: 12345
    output: out/run
    model:
      kind: Ruin                 # LetacE | Ruin | Linear | Polynomial
      driver: {family: ruin, m_R: 0.2, ...}
      poly_coeffs: []            # Polynomial only
    regen: {scheme: auto}        # auto | atom | smallset (plus overrides)
    compute: {...}               # see COMPUTE_DEFAULTS

The canonical form is JSON with sorted keys; its FNV-1a hash tags every
output file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .drivers import make_driver
from .errors import ConfigError
from .regeneration import RegenScheme, make_regen
from .rng import fnv1a64
from .sfpe_core import ModelSpec, make_model

COMPUTE_DEFAULTS: dict[str, Any] = {
    # regeneration cycles under the shifted measure (numerator of C)
    "n_cycles": 20_000,
    # original-measure cycles for E[tau] and crude tail estimates
    "n_tau_cycles": 100_000,
    # random walks for C*, Theta and renewal functions
    "n_walks": 100_000,
    # tail-curve levels; u_quantiles (stationary quantiles) override u_grid
    "u_grid": [10.0, 100.0, 1000.0],
    "u_quantiles": None,
    "n_quantile_cycles": 200_000,
    "tail_method": "dual",
    # interior exponent of the bound, in (0, 1)
    "t": 0.5,
    # Lundberg-bound sampling
    "lundberg_u_grid": None,
    "n_x": 200_000,
    "n_w": 33,
    "n_w_cycles": 10_000,
    "n_zbar_cycles": 20_000,
    "n_vbar": 200_000,
    # escape detection and step cap for shifted cycles
    "esc_S": 50.0,
    "esc_level": None,
    "cap": None,
    "min_escapes": 100,
    # renewal checks
    "theorem41_v": 4.0,
    "theorem41_u": [1000.0, 10000.0, 100000.0],
    "n_paths": 20_000,
    "n_hits": 2_000,
    "n_cont": 64,
    "qu_u": [1000.0, 10000.0],
    "qu_cycles": 20_000,
    # validation battery
    "validate_paths": 100_000,
    "validate_horizon": 5,
    "identity_paths": 10_000,
    "identity_steps": 100,
    "tilt_offset": 0.0,
    # estimate targets
    "targets": ["C", "Cstar", "theta", "lundberg", "tailcurve"],
}

TOP_KEYS = {"seed", "output", "model", "regen", "compute"}
TARGETS = {"C", "Cstar", "theta", "lundberg", "tailcurve"}


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


@dataclass
class RunConfig:
    model: dict
    regen: dict = field(default_factory=lambda: {"scheme": "auto"})
    compute: dict = field(default_factory=lambda: dict(COMPUTE_DEFAULTS))
    seed: int = 0
    output: str = "out"

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a mapping")
        extra = set(raw) - TOP_KEYS
        if extra:
            raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
        if "model" not in raw:
            raise ConfigError("config needs a model block")
        model = copy.deepcopy(dict(raw["model"]))
        if "kind" not in model or "driver" not in model:
            raise ConfigError("model block needs kind and driver")
        if not isinstance(model["driver"], Mapping) or "family" not in model["driver"]:
            raise ConfigError("model.driver needs a family")
        compute = dict(COMPUTE_DEFAULTS)
        unknown = set(raw.get("compute") or {}) - set(COMPUTE_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown compute keys: {sorted(unknown)}")
        compute.update(copy.deepcopy(dict(raw.get("compute") or {})))
        bad = set(compute["targets"]) - TARGETS
        if bad:
            raise ConfigError(f"unknown targets {sorted(bad)}")
        t = float(compute["t"])
        if not 0 < t < 1:
            raise ConfigError("compute.t must be in (0, 1)")
        for key in ("n_cycles", "n_tau_cycles", "n_walks"):
            if int(compute[key]) < 0:
                raise ConfigError(f"compute.{key} must be nonnegative")
        try:
            seed = int(raw.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad seed: {exc}") from exc
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return cls(model, copy.deepcopy(dict(raw.get("regen") or {"scheme": "auto"})), compute, seed,
                   str(raw.get("output", "out")))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "output": self.output, "model": copy.deepcopy(self.model),
                "regen": copy.deepcopy(self.regen), "compute": copy.deepcopy(self.compute)}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def canonical(self) -> str:
        """Sorted-key JSON of everything except the output directory."""
        d = self.to_dict()
        d.pop("output")
        return _canonical(d)

    @property
    def hash(self) -> str:
        return f"{fnv1a64(self.canonical()):016x}"

    def with_seed(self, seed: int) -> "RunConfig":
        out = RunConfig.from_dict(self.to_dict())
        out.seed = int(seed)
        return out

    # -- builders

    def build_model(self) -> ModelSpec:
        m = self.model
        drv = dict(m["driver"])
        family = drv.pop("family")
        dep = drv.pop("dependence", None)
        driver = make_driver(family, drv, dep)
        return make_model(m["kind"], driver, m.get("poly_coeffs") or ())

    def build_regen(self, model: ModelSpec) -> RegenScheme:
        return make_regen(model, self.regen)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad YAML in {path}: {exc}") from exc
    return RunConfig.from_dict(raw or {})


def parse_config(text: str) -> RunConfig:
    return RunConfig.from_dict(yaml.safe_load(text) or {})
