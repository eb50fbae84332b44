"""Renewal-theory diagnostics.

* renewal_function: U(z) = E #{n >= 0 : -S_n < z}
* overshoot_distribution: log(V_{T_u}/u) against the integrated tail of
  the ladder-height law of the tilted walk
* theorem41_check: E[N_u | V_0 = v u] against U(log v)
* qu_diagnostic: Q_u = E[N_u | path to T_u] (V_{T_u}/u)^-xi across u
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .drivers import DriverSpec
from .estimators import sup_closed_form
from .errors import CycleOverrun, EmptyInput, InsufficientHits, InvalidParams, NonPositiveDriftForU
from .regeneration import EngineConfig, RegenScheme, simulate_block
from .rng import DEFAULT_BLOCK, Stream, as_stream, run_blocks
from .sfpe_core import ModelSpec
from .stats import batch_means
from .tilt_engine import simulate_dual

log = logging.getLogger(__name__)

MARGIN = 50.0
STEP_CAP = 1_000_000


# ---------------------------------------------------------------------------
# renewal function


@dataclass
class RenewalFunction:
    grid: np.ndarray
    U_values: np.ndarray
    U_stderr: np.ndarray
    n_walks: int
    measure: str
    m: float
    sigma2: float

    def __call__(self, z) -> np.ndarray:
        """Step interpolation: U at the largest grid point <= z."""
        z = np.asarray(z, dtype=float)
        i = np.searchsorted(self.grid, z, side="right") - 1
        out = np.where(i >= 0, self.U_values[np.clip(i, 0, None)], 0.0)
        return out

    def lorden(self) -> np.ndarray:
        z = np.maximum(self.grid, 0.0)
        return z / self.m + 1.0 + self.sigma2 / self.m**2

    def lorden_ok(self) -> bool:
        return bool(np.all(self.U_values <= self.lorden() + 2 * self.U_stderr))


def _renewal_block(driver, alpha, z, margin, cap, rng, size):
    counts = np.zeros((size, len(z)))
    W = np.zeros(size)
    idx = np.arange(size)
    zmax = float(z.max()) + margin
    n = 0
    while len(idx):
        counts[idx] += W[:, None] < z[None, :]
        keep = W <= zmax
        idx, W = idx[keep], W[keep]
        if not len(idx):
            break
        if n >= cap:
            raise CycleOverrun(f"renewal walk exceeded {cap} steps")
        W = W - driver.impl.sample(rng, len(idx), alpha).logA
        n += 1
    return counts


def renewal_function(driver: DriverSpec, z_grid: Sequence[float], n_walks: int, measure: str = "original",
                     stream: Stream | int | None = None, xi: float | None = None, margin: float = MARGIN,
                     mapper=None) -> RenewalFunction:
    """Monte Carlo renewal function of the walk -S_n with increments -log A."""
    if n_walks <= 0:
        raise EmptyInput("n_walks must be positive")
    z = np.sort(np.asarray(z_grid, dtype=float))
    if measure == "original":
        alpha = 0.0
    elif measure == "shifted":
        if xi is None:
            raise InvalidParams("the shifted measure needs xi")
        alpha = float(xi)
    else:
        raise InvalidParams(f"unknown measure {measure!r}")
    x = -driver.impl.sample(np.random.default_rng(3), 200_000, alpha).logA
    m, s2 = float(x.mean()), float(x.var())
    if measure == "original":
        m0, s0 = driver.logA_moments()
        m, s2 = -m0, s0
    if not m > 0:
        raise NonPositiveDriftForU(f"-log A has mean {m:.4g} under the {measure} measure")
    parts = run_blocks(_renewal_block, as_stream(stream).child("renewal").child(measure), n_walks,
                       (driver, alpha, z, margin, STEP_CAP), DEFAULT_BLOCK, mapper)
    counts = np.concatenate(parts)
    vals = counts.mean(axis=0)
    ses = np.array([batch_means(counts[:, j])[1] for j in range(len(z))])
    return RenewalFunction(z, vals, ses, n_walks, measure, m, s2)


# ---------------------------------------------------------------------------
# overshoot


@dataclass
class OvershootSample:
    ratios: np.ndarray
    u: float
    measure_tag: str
    conditioning: str = "tau"
    ladder_heights: np.ndarray = field(default_factory=lambda: np.empty(0))
    ladder_sample: np.ndarray = field(default_factory=lambda: np.empty(0))
    ks_stat: float = math.nan
    ks_pvalue: float = math.nan
    hit_fraction: float = math.nan
    n_cycles: int = 0

    @property
    def log_ratios(self) -> np.ndarray:
        return np.log(self.ratios)

    def ks_against(self, cdf) -> tuple[float, float]:
        r = stats.kstest(self.log_ratios, cdf)
        return float(r.statistic), float(r.pvalue)


def ladder_heights(driver: DriverSpec, xi: float, n: int, rng: np.random.Generator, width: int = 4096,
                   cap: int = STEP_CAP) -> np.ndarray:
    """Strict ascending ladder increments of the walk with tilted steps."""
    out = []
    got = 0
    S = np.zeros(width)
    M = np.zeros(width)
    steps = 0
    while got < n:
        if steps >= cap:
            raise CycleOverrun("ladder harvesting did not finish")
        S += driver.impl.sample(rng, width, xi).logA
        up = S > M
        if up.any():
            h = S[up] - M[up]
            out.append(h)
            got += len(h)
            M[up] = S[up]
        steps += 1
    return np.concatenate(out)[:n]


def integrated_tail_sample(heights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the density P(H > y)/E[H]: a size-biased H times U(0,1)."""
    p = heights / heights.sum()
    hb = rng.choice(heights, size=n, p=p)
    return hb * rng.random(n)


def _first_passage_shifted(model, regen, xi, u, n, rng, cap=100_000):
    v = regen.sample_nu(rng, n)
    out = np.full(n, np.nan)
    idx = np.arange(n)
    hit = v > u
    out[idx[hit]] = v[hit]
    idx, v = idx[~hit], v[~hit]
    k = 0
    while len(idx):
        if k >= cap:
            raise CycleOverrun("shifted chain did not reach u")
        v = model.apply(v, model.sample(rng, len(idx), xi))
        hit = v > u
        out[idx[hit]] = v[hit]
        idx, v = idx[~hit], v[~hit]
        k += 1
    return out


def overshoot_distribution(model: ModelSpec, regen: RegenScheme, xi: float, u: float, n_hits: int,
                           stream: Stream | int | None = None, conditioning: str = "tau",
                           n_ladder: int = 100_000, max_rounds: int = 64, mapper=None) -> OvershootSample:
    """Sample of V_{T_u}/u given T_u < tau (dual cycles stopped at the hit)
    or given T_u < inf (shifted chain, regeneration ignored), with a
    companion integrated-tail sample of tilted ladder heights."""
    if n_hits <= 0:
        raise EmptyInput("n_hits must be positive")
    s = as_stream(stream).child("overshoot")
    if u < 10 * max(1.0, regen.hi):
        log.warning("u=%g is not large relative to the small set", u)
    n_cyc = 0
    if conditioning == "tau":
        got = []
        have = 0
        frac = math.nan
        n_round = max(4 * n_hits, DEFAULT_BLOCK)
        for k in range(max_rounds):
            b = simulate_dual(model, regen, xi, u, n_round, s.child("round").child(str(k)), mapper=mapper,
                              stop_at_hit=True)
            hit = b.Tu[:, 0] >= 0
            n_cyc += len(b)
            got.append(b.VTu[hit, 0] / u)
            have += int(hit.sum())
            if have >= n_hits:
                break
            frac = have / n_cyc
            if frac > 0:
                n_round = int(min(10 * n_hits, max(DEFAULT_BLOCK, 1.2 * (n_hits - have) / frac)))
        ratios = np.concatenate(got)[:n_hits]
        if len(ratios) < n_hits:
            raise InsufficientHits(f"{len(ratios)} hits of {u} after {n_cyc} cycles (need {n_hits})")
        frac = have / n_cyc
        tag = "dual"
    elif conditioning == "inf":
        ratios = _first_passage_shifted(model, regen, xi, u, n_hits, s.child("inf").generator(0)) / u
        frac, tag, n_cyc = 1.0, "shifted", n_hits
    else:
        raise InvalidParams(f"unknown conditioning {conditioning!r}")
    rl = s.child("ladder").generator(0)
    h = ladder_heights(model.driver, xi, n_ladder, rl)
    it = integrated_tail_sample(h, len(ratios), rl)
    ks = stats.ks_2samp(np.log(ratios), it)
    return OvershootSample(ratios, float(u), tag, conditioning, h, it, float(ks.statistic), float(ks.pvalue),
                           frac, n_cyc)


# ---------------------------------------------------------------------------
# Theorem 4.1 check


def _t41_block(model, regen, v, u, margin, cap, rng, size):
    nu_ = len(u)
    logv = math.log(v)
    V = np.tile(v * u, (size, 1))
    live = np.ones((size, nu_), dtype=bool)
    N = np.zeros((size, nu_))
    R = np.zeros(size)
    W = np.zeros(size)
    wlive = np.ones(size, dtype=bool)
    n = 0
    while live.any() or wlive.any():
        N += live & (V > u[None, :])
        R += wlive & (W < logv)
        wlive &= W <= logv + margin
        if regen is None:
            live &= np.abs(V) >= u[None, :] * math.exp(-margin)
        if not (live.any() or wlive.any()):
            break
        if n >= cap:
            raise CycleOverrun(f"theorem 4.1 paths exceeded {cap} steps")
        # every path consumes the same draws whatever u is
        U = rng.random(size)
        d = model.sample(rng, size)
        W = W - d.logA
        for j in range(nu_):
            Vj = V[:, j]
            Vn = model.apply(Vj, d)
            if regen is not None:
                inC = regen.in_c(Vj)
                if regen.kind == "atom":
                    end = inC
                else:
                    r = np.zeros(size)
                    if inC.any():
                        r[inC] = regen.regen_prob(Vj[inC], Vn[inC])
                        if d.ac is not None:
                            r = np.where(d.ac, r, 0.0)
                    end = U < r
                live[:, j] &= ~end
            V[:, j] = Vn
        n += 1
    return N, R


def theorem41_check(model: ModelSpec, v: float, u_grid: Sequence[float], n_paths: int,
                    stream: Stream | int | None = None, regen: RegenScheme | None = None,
                    renewal: RenewalFunction | None = None, margin: float = MARGIN, cap: int = STEP_CAP,
                    mapper=None) -> list[dict]:
    """E[N_u | V_0 = v u] for each u and U(log v), with paired draws: the
    walk count uses the same log A as the chain, and every u level sees
    the same driving sequence. With regen=None exceedances are counted
    until the state falls below u e^-margin (for models without a
    regeneration scheme, e.g. deterministic A)."""
    if not v > 1:
        raise InvalidParams("v must exceed 1")
    u = np.asarray(u_grid, dtype=float)
    parts = run_blocks(_t41_block, as_stream(stream).child("theorem41"), n_paths,
                       (model, regen, float(v), u, margin, cap), DEFAULT_BLOCK, mapper)
    N = np.concatenate([p[0] for p in parts])
    R = np.concatenate([p[1] for p in parts])
    Um, Use = batch_means(R)
    rows = []
    for j, lev in enumerate(u):
        m, se = batch_means(N[:, j])
        g, gse = batch_means(N[:, j] - R)
        row = {"u": float(lev), "v": float(v), "E_Nu": m, "E_Nu_se": se, "U_logv": Um, "U_logv_se": Use,
               "gap": g, "gap_se": gse, "n_paths": int(n_paths)}
        if renewal is not None:
            row["U_ref"] = float(renewal(math.log(v)))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Q_u diagnostic


@dataclass
class QuDiagnostic:
    rows: list[dict]
    samples: dict
    synth: np.ndarray | None = None


def qu_diagnostic(model: ModelSpec, regen: RegenScheme, xi: float, u_grid: Sequence[float], n_cycles: int,
                  stream: Stream | int | None = None, n_cont: int = 64, max_hits: int = 2000,
                  constants: Sequence[tuple[float, float]] | None = None, synthesize: bool = True,
                  n_ladder: int = 100_000, n_walks: int = 20_000, mapper=None) -> QuDiagnostic:
    """Q_u at each u from dual cycles stopped at T_u, with the inner
    expectation from ``n_cont`` original-measure continuations per hit.
    Continuations at every u use the same substream."""
    s = as_stream(stream).child("qu")
    u_grid = [float(x) for x in u_grid]
    samples = {}
    rows = []
    for j, u in enumerate(u_grid):
        b = simulate_dual(model, regen, xi, u, n_cycles, s.child("hits"), mapper=mapper, stop_at_hit=True)
        hit = b.Tu[:, 0] >= 0
        vt = b.VTu[hit, 0][:max_hits]
        if len(vt) < 2:
            raise InsufficientHits(f"{len(vt)} hits of u={u} in {n_cycles} dual cycles")
        v0 = np.repeat(vt, n_cont)
        cfg = EngineConfig(v0=v0, u_levels=(u,))
        cb = simulate_block(model, regen, cfg, s.child("cont").generator(0), len(v0))
        en = cb.Nu[:, 0].reshape(len(vt), n_cont).mean(axis=1)
        q = en * (vt / u) ** (-xi)
        samples[u] = q
        m, se = batch_means(q)
        rows.append({"u": u, "stat": "Q_mean", "value": m, "stderr": se})
        rows.append({"u": u, "stat": "n_hits", "value": float(len(vt)), "stderr": 0.0})
        if constants is not None:
            c1, c2 = constants[j]
            sup = sup_closed_form(c1, c2, xi)
            rows.append({"u": u, "stat": "bound", "value": sup, "stderr": 0.0})
            rows.append({"u": u, "stat": "bound_violation_frac", "value": float(np.mean(q > sup)), "stderr": 0.0})
    for a, c in zip(u_grid, u_grid[1:]):
        ks = stats.ks_2samp(samples[a], samples[c])
        rows.append({"u": a, "stat": "ks_next", "value": float(ks.statistic), "stderr": float(ks.pvalue)})
    synth = None
    if synthesize:
        rl = s.child("synth").generator(0)
        y = integrated_tail_sample(ladder_heights(model.driver, xi, n_ladder, rl), 20_000, rl)
        grid = np.linspace(0.0, float(y.max()) + 1e-9, 256)
        U = renewal_function(model.driver, grid, n_walks, stream=s.child("synth-U"), mapper=mapper)
        synth = U(y) * np.exp(-xi * y)
        for u in u_grid:
            ks = stats.ks_2samp(samples[u], synth)
            rows.append({"u": u, "stat": "ks_synth", "value": float(ks.statistic), "stderr": float(ks.pvalue)})
    return QuDiagnostic(rows, samples, synth)
