"""Changes of measure on the driving sequence.

* shifted: every draw from mu_xi
* dual: draws 1..T_u from mu_xi, later draws from mu

Likelihood ratios are kept as log weights. For a dual cycle the weight is
exp(-xi S_{T_u}) if u was hit before regeneration and exp(-xi S_tau)
otherwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .drivers import cumulant
from .errors import EmptyInput, InvalidParams
from .regeneration import CycleBatch, CyclePath, EngineConfig, RegenScheme, simulate_block, simulate_cycles
from .rng import Stream, as_stream
from .sfpe_core import ModelSpec
from .stats import Estimate, batch_means, ratio_independent

log = logging.getLogger(__name__)

WEIGHT_SHARE_FLAG = 0.10


@dataclass(frozen=True)
class DualPolicy:
    xi: float
    u: float
    revert_after_hit: bool = True


@dataclass
class WeightedSample:
    value: float
    logweight: float
    measure_tag: str
    branch: str = ""

    @property
    def weight(self) -> float:
        return math.exp(self.logweight)


@dataclass
class WeightedSet:
    """Many weighted values; merging keeps a common max shift so sums of
    tiny weights do not underflow."""

    values: np.ndarray
    logweights: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.logweights = np.asarray(self.logweights, dtype=float)

    def merge(self, other: "WeightedSet") -> "WeightedSet":
        return WeightedSet(np.concatenate([self.values, other.values]),
                           np.concatenate([self.logweights, other.logweights]))

    def shift(self) -> float:
        lw = self.logweights[self.values != 0]
        return float(lw.max()) if len(lw) else 0.0

    def scaled_terms(self, shift: float | None = None) -> tuple[float, np.ndarray]:
        c = self.shift() if shift is None else shift
        with np.errstate(under="ignore"):
            t = np.where(self.values != 0, self.values * np.exp(self.logweights - c), 0.0)
        return c, t

    def mean(self, n_batches: int = 50) -> tuple[float, float]:
        if len(self.values) == 0:
            raise EmptyInput("no weighted samples")
        c, t = self.scaled_terms()
        m, se = batch_means(t, n_batches)
        return math.exp(c) * m, math.exp(c) * se

    def log_mean(self, n_batches: int = 50) -> tuple[float, float]:
        """log of the mean and the relative stderr."""
        c, t = self.scaled_terms()
        m, se = batch_means(t, n_batches)
        return c + math.log(m) if m > 0 else -math.inf, se / m if m > 0 else math.inf

    def max_share(self) -> float:
        _, t = self.scaled_terms()
        s = np.abs(t).sum()
        return float(np.abs(t).max() / s) if s > 0 else 0.0


def run_shifted_cycle(model: ModelSpec, regen: RegenScheme, xi: float, stream: Stream | int | None = None,
                      **kw) -> CyclePath:
    cfg = EngineConfig(measure="shifted", xi=xi, retain=True, **kw)
    rng = as_stream(stream).child("shifted-single").generator(0)
    return simulate_block(model, regen, cfg, rng, 1).paths[0]


def dual_logweights(batch: CycleBatch, xi: float, j: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Log weights of dual cycles and the hit indicator."""
    hit = batch.Tu[:, j] >= 0
    lw = np.where(hit, -xi * batch.STu[:, j], -xi * batch.S_end)
    return lw, hit


def run_dual_cycle(model: ModelSpec, regen: RegenScheme, policy: DualPolicy,
                   stream: Stream | int | None = None, **kw) -> tuple[CyclePath, WeightedSample]:
    """One dual-measure cycle and its weighted N_u sample."""
    cfg = EngineConfig(measure="dual", xi=policy.xi, u_levels=(policy.u,), retain=True, **kw)
    rng = as_stream(stream).child("dual-single").generator(0)
    b = simulate_block(model, regen, cfg, rng, 1)
    lw, hit = dual_logweights(b, policy.xi)
    path = b.paths[0]
    ws = WeightedSample(float(path.Nu), float(lw[0]), "dual", "hit" if hit[0] else "regenerated")
    return path, ws


def simulate_dual(model, regen, xi, u, n_cycles, stream, mapper=None, **kw) -> CycleBatch:
    cfg = EngineConfig(measure="dual", xi=xi, u_levels=(float(u),), **kw)
    return simulate_cycles(model, regen, n_cycles, as_stream(stream).child("dual").child(repr(float(u))),
                           cfg, mapper=mapper)


def dual_mean_Nu(batch: CycleBatch, xi: float) -> tuple[Estimate, dict]:
    """E[N_u] from dual cycles. Only the hit branch contributes because
    N_u = 0 when regeneration comes first."""
    lw, hit = dual_logweights(batch, xi)
    ws = WeightedSet(batch.Nu[:, 0].astype(float), lw)
    m, se = ws.mean()
    share = ws.max_share()
    diag = {
        "hit_fraction": float(hit.mean()),
        "max_weight_share": share,
        "heavy_weights": share > WEIGHT_SHARE_FLAG,
        "undecided": int(batch.undecided.sum()),
    }
    if share > WEIGHT_SHARE_FLAG:
        log.warning("one dual cycle carries %.0f%% of the weight", 100 * share)
    return Estimate(m, se, len(batch), {"quantity": "E[N_u]", "measure": "dual", **diag}), diag


def dual_branches(batch: CycleBatch, xi: float, g: str = "tau") -> dict:
    """Both terms of the two-branch change of measure for g in {tau, Nu}.
    Their sum estimates E[g] under the original measure."""
    lw, hit = dual_logweights(batch, xi)
    vals = batch.tau.astype(float) if g == "tau" else batch.Nu[:, 0].astype(float)
    if not np.all(np.isfinite(vals)):
        raise InvalidParams("undecided dual cycles; raise the step cap")
    terms = vals * np.exp(lw)
    b1 = np.where(hit, terms, 0.0)
    b2 = np.where(hit, 0.0, terms)
    m1, s1 = batch_means(b1)
    m2, s2 = batch_means(b2)
    mt, st = batch_means(terms)
    return {"hit": (m1, s1), "regenerated": (m2, s2), "total": (mt, st)}


def importance_tail_estimate(model: ModelSpec, regen: RegenScheme, xi: float, u: float, n_cycles: int,
                             stream: Stream | int | None = None, tau_estimate: Estimate | None = None,
                             n_tau_cycles: int | None = None, mapper=None) -> Estimate:
    """P(V > u) = E[N_u]/E[tau] with E[N_u] from dual cycles and E[tau]
    from original-measure cycles."""
    s = as_stream(stream)
    batch = simulate_dual(model, regen, xi, u, n_cycles, s, mapper=mapper)
    e_nu, diag = dual_mean_Nu(batch, xi)
    if tau_estimate is None:
        ob = simulate_cycles(model, regen, n_tau_cycles or n_cycles, s.child("tau"), EngineConfig(), mapper=mapper)
        m, se = batch_means(ob.tau.astype(float))
        tau_estimate = Estimate(m, se, len(ob), {"quantity": "E[tau]"})
    p, sp = ratio_independent(e_nu.value, e_nu.stderr, tau_estimate.value, tau_estimate.stderr)
    meta = {"quantity": "P(V>u)", "u": float(u), "method": "dual", "E_Nu": e_nu.value, "E_Nu_se": e_nu.stderr,
            "E_tau": tau_estimate.value, "rel_se": sp / p if p > 0 else math.inf, **diag}
    return Estimate(p, sp, len(batch), meta)


# ---------------------------------------------------------------------------
# fixed-horizon identity


def fixed_horizon_check(model: ModelSpec, alpha: float, n_paths: int = 100_000, horizon: int = 5,
                        stream: Stream | int | None = None, v0_sampler=None, tilt_offset: float = 0.0,
                        n_batches: int = 50) -> dict:
    """Compare E[g] with lam(alpha)^n E_alpha[g exp(-alpha S_n)] for
    g = 1{V_n > median}. ``tilt_offset`` samples the shifted side from
    alpha + offset while weighting with alpha (a negative control)."""
    s = as_stream(stream).child("fixed-horizon")
    lam = cumulant(model.driver).lam(alpha)
    r0, r1, rp = s.generator(0), s.generator(1), s.generator(2)

    def run(rng, a, n):
        v = v0_sampler(rng, n) if v0_sampler is not None else np.ones(n)
        S = np.zeros(n)
        for _ in range(horizon):
            d = model.sample(rng, n, a)
            v = model.apply(v, d)
            S += d.logA
        return v, S

    vp, _ = run(rp, 0.0, min(n_paths, 20_000))
    med = float(np.median(vp))
    v0, _ = run(r0, 0.0, n_paths)
    v1, S1 = run(r1, alpha + tilt_offset, n_paths)
    g0 = (v0 > med).astype(float)
    g1 = (v1 > med) * np.exp(-alpha * S1 + horizon * math.log(lam))
    m0, s0 = batch_means(g0, n_batches)
    m1, s1 = batch_means(g1, n_batches)
    se = math.hypot(s0, s1)
    z = (m0 - m1) / se if se > 0 else 0.0
    return {"original": m0, "original_se": s0, "shifted": m1, "shifted_se": s1, "z": z,
            "passed": abs(z) <= 3.0, "median": med, "alpha": alpha, "tilt_offset": tilt_offset}
