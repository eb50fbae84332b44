"""Estimators for the tail constant and its pieces.

    C      = E_xi[(Zp - Zc)^xi 1{tau = inf}] / (xi lam'(xi) E[tau])
    C*     = (1 - E[exp(xi S_tau*)]) / (xi lam'(xi) E[tau*])
    Theta  = (1 - E[exp(xi S_tau*)]) / E[tau*]

with tau* = inf{n >= 1 : S_n <= 0} for the random walk S_n = sum log A_i.
Also the finite-u Lundberg-type bound and the tail curve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .drivers import DriverSpec, cumulant, solve_xi
from .errors import EmptyInput, InsufficientEscapes, InvalidParams, UnsupportedKind, WalkOverrun
from .regeneration import (
    CycleBatch,
    DriftParams,
    EngineConfig,
    RegenScheme,
    compute_drift_params,
    cycle_stats,
    simulate_cycles,
)
from .rng import DEFAULT_BLOCK, Stream, as_stream, run_blocks
from .sfpe_core import ModelSpec
from .stats import Estimate, batch_means, ratio_independent, ratio_same_sample
from .tilt_engine import dual_logweights, importance_tail_estimate, simulate_dual

__all__ = [
    "CComponents",
    "LadderStats",
    "LundbergConstants",
    "compute_drift_params",
    "cstar_constant_driver",
    "decompose_C",
    "estimate_C",
    "estimate_C_components",
    "estimate_Cstar",
    "estimate_theta",
    "ladder_stats",
    "ladder_walks",
    "lundberg_bound",
    "sup_closed_form",
    "tail_curve",
    "theta_constant_driver",
]

log = logging.getLogger(__name__)

MIN_ESCAPES = 100
WALK_CAP = 10_000_000


def _lambda_prime(model: ModelSpec, xi: float | None, lambda_prime: float | None) -> tuple[float, float]:
    if xi is None or lambda_prime is None:
        sol = solve_xi(cumulant(model.driver))
        xi = sol.xi if xi is None else xi
        lambda_prime = sol.lambda_prime if lambda_prime is None else lambda_prime
    return float(xi), float(lambda_prime)


# ---------------------------------------------------------------------------
# C


@dataclass
class CComponents:
    xi: float
    lambda_prime: float
    numerator: Estimate
    E_tau: Estimate
    escape_fraction: float
    undecided_fraction: float
    identity_gap: float
    n_escapes: int

    @property
    def C(self) -> Estimate:
        den = self.xi * self.lambda_prime
        c, se = ratio_independent(self.numerator.value, self.numerator.stderr, self.E_tau.value, self.E_tau.stderr)
        meta = {
            "quantity": "C",
            "numerator": self.numerator.value,
            "numerator_se": self.numerator.stderr,
            "E_tau": self.E_tau.value,
            "E_tau_se": self.E_tau.stderr,
            "escape_fraction": self.escape_fraction,
            "undecided_fraction": self.undecided_fraction,
            "identity_gap": self.identity_gap,
            "n_escapes": self.n_escapes,
        }
        return Estimate(c / den, se / den, self.numerator.n_samples, meta)


def _numerator_terms(model: ModelSpec, sb: CycleBatch, xi: float) -> tuple[np.ndarray, float]:
    esc = sb.tau_inf
    if model.kind == "Polynomial":
        base = sb.poly
    else:
        base = sb.zdiff
    vals = np.zeros(len(sb))
    b = np.maximum(base[esc], 0.0)
    vals[esc] = b**xi
    gap = 0.0
    if esc.any() and model.kind != "Polynomial":
        zt = sb.ztilde_end[esc]
        ok = zt > 0
        if ok.any():
            gap = float(np.max(np.abs(base[esc][ok] - zt[ok]) / np.abs(zt[ok])))
    return vals, gap


def estimate_C_components(model: ModelSpec, regen: RegenScheme, n_cycles: int, stream: Stream | int | None = None,
                          xi: float | None = None, lambda_prime: float | None = None,
                          n_tau_cycles: int | None = None, E_tau: Estimate | None = None,
                          min_escapes: int = MIN_ESCAPES, mapper=None, **engine) -> CComponents:
    """Shifted-measure numerator and original-measure E[tau]."""
    xi, lp = _lambda_prime(model, xi, lambda_prime)
    s = as_stream(stream)
    poly = model.kind == "Polynomial"
    cfg = EngineConfig(measure="shifted", xi=xi, track_backward=not poly, track_poly=poly, **engine)
    sb = simulate_cycles(model, regen, n_cycles, s.child("C-numerator"), cfg, mapper=mapper)
    n_esc = int(sb.tau_inf.sum())
    if n_esc < min_escapes:
        raise InsufficientEscapes(f"only {n_esc} of {n_cycles} shifted cycles escaped (need {min_escapes})")
    vals, gap = _numerator_terms(model, sb, xi)
    m, se = batch_means(vals)
    num = Estimate(m, se, len(sb), {"quantity": "E_xi[(Zp-Zc)^xi 1{tau=inf}]"})
    if E_tau is None:
        ob = simulate_cycles(model, regen, n_tau_cycles or n_cycles, s.child("C-tau"), EngineConfig(), mapper=mapper)
        mt, st = batch_means(ob.tau.astype(float))
        E_tau = Estimate(mt, st, len(ob), {"quantity": "E[tau]"})
    und = float(sb.undecided.mean())
    if und > 0:
        log.warning("%.2g%% of shifted cycles hit the step cap undecided", 100 * und)
    return CComponents(xi, lp, num, E_tau, n_esc / len(sb), und, gap, n_esc)


def estimate_C(model: ModelSpec, regen: RegenScheme, n_cycles: int, stream: Stream | int | None = None,
               **kw) -> Estimate:
    return estimate_C_components(model, regen, n_cycles, stream, **kw).C


# ---------------------------------------------------------------------------
# ladder walk: C* and Theta


@dataclass
class LadderStats:
    xi: float
    tau_star: Estimate
    one_minus_E: Estimate
    analytic: bool = False
    n_walks: int = 0

    def cstar(self, lambda_prime: float) -> Estimate:
        c, se = ratio_independent(self.one_minus_E.value, self.one_minus_E.stderr,
                                  self.tau_star.value, self.tau_star.stderr)
        den = self.xi * lambda_prime
        return Estimate(c / den, se / den, self.n_walks,
                        {"quantity": "C*", "analytic": self.analytic, "E_tau_star": self.tau_star.value,
                         "one_minus_E": self.one_minus_E.value})

    def theta(self) -> Estimate:
        t, se = ratio_independent(self.one_minus_E.value, self.one_minus_E.stderr,
                                  self.tau_star.value, self.tau_star.stderr)
        return Estimate(t, se, self.n_walks,
                        {"quantity": "Theta", "analytic": self.analytic, "E_tau_star": self.tau_star.value,
                         "one_minus_E": self.one_minus_E.value})


def _ladder_block(driver: DriverSpec, xi: float, cap: int, rng: np.random.Generator, size: int):
    tau = np.zeros(size, dtype=np.int64)
    ex = np.zeros(size)
    idx = np.arange(size)
    S = np.zeros(size)
    n = 0
    while len(idx):
        if n >= cap:
            raise WalkOverrun(f"ladder walk exceeded {cap} steps")
        S = S + driver.sample(rng, len(idx)).logA
        n += 1
        done = S <= 0
        if done.any():
            tau[idx[done]] = n
            ex[idx[done]] = np.exp(xi * S[done])
            idx, S = idx[~done], S[~done]
    return tau, ex


def ladder_walks(driver: DriverSpec, xi: float, n_walks: int, stream: Stream | int | None = None,
                 cap: int = WALK_CAP, mapper=None) -> LadderStats:
    """tau* and exp(xi S_tau*) for the unreflected walk under the base law."""
    if n_walks <= 0:
        raise EmptyInput("n_walks must be positive")
    parts = run_blocks(_ladder_block, as_stream(stream).child("ladder"), n_walks, (driver, xi, cap),
                       DEFAULT_BLOCK, mapper)
    tau = np.concatenate([p[0] for p in parts]).astype(float)
    ex = np.concatenate([p[1] for p in parts])
    mt, st = batch_means(tau)
    me, se = batch_means(1.0 - ex)
    return LadderStats(xi, Estimate(mt, st, n_walks, {"quantity": "E[tau*]"}),
                       Estimate(me, se, n_walks, {"quantity": "1-E[exp(xi S_tau*)]"}), False, n_walks)


def _constant_logA(driver: DriverSpec) -> float | None:
    if driver.family != "constant":
        return None
    return math.log(float(driver.params["a"]))


def theta_constant_driver(log_a: float, xi: float) -> float:
    """Deterministic A: tau* = 1 and S_tau* = log a."""
    return -math.expm1(xi * log_a)


def cstar_constant_driver(log_a: float, xi: float, lambda_prime: float) -> float:
    return theta_constant_driver(log_a, xi) / (xi * lambda_prime)


def ladder_stats(driver: DriverSpec, xi: float, n_walks: int, stream: Stream | int | None = None,
                 ladder: LadderStats | None = None, mapper=None) -> LadderStats:
    """Ladder statistics, exact for a deterministic A."""
    if ladder is not None:
        return ladder
    la = _constant_logA(driver)
    if la is not None:
        return LadderStats(xi, Estimate(1.0, 0.0, 0), Estimate(theta_constant_driver(la, xi), 0.0, 0), True, 0)
    return ladder_walks(driver, xi, n_walks, stream, mapper=mapper)


def estimate_Cstar(driver: DriverSpec, n_walks: int = 100_000, stream: Stream | int | None = None,
                   xi: float | None = None, lambda_prime: float | None = None,
                   ladder: LadderStats | None = None, mapper=None) -> Estimate:
    if xi is None or lambda_prime is None:
        sol = solve_xi(cumulant(driver))
        xi = sol.xi if xi is None else xi
        lambda_prime = sol.lambda_prime if lambda_prime is None else lambda_prime
    return ladder_stats(driver, xi, n_walks, stream, ladder, mapper).cstar(lambda_prime)


def estimate_theta(driver: DriverSpec, n_walks: int = 100_000, stream: Stream | int | None = None,
                   xi: float | None = None, ladder: LadderStats | None = None, mapper=None,
                   model: ModelSpec | None = None, regen: RegenScheme | None = None,
                   u_levels: Sequence[float] = (), n_cycles: int = 20_000) -> Estimate:
    """Theta from the ladder walk. With ``model``, ``regen`` and ``u_levels``
    the finite-u ratio P(T_u < tau)/E[N_u] is added to meta, estimated
    from dual cycles (both quantities share the same weights)."""
    if xi is None:
        xi = solve_xi(cumulant(driver)).xi
    est = ladder_stats(driver, xi, n_walks, stream, ladder, mapper).theta()
    if model is not None and regen is not None and u_levels:
        est.meta["finite_u"] = theta_finite_u(model, regen, xi, u_levels, n_cycles, stream, mapper)
    return est


def theta_finite_u(model: ModelSpec, regen: RegenScheme, xi: float, u_levels: Sequence[float],
                   n_cycles: int, stream: Stream | int | None = None, mapper=None) -> list[dict]:
    """P(T_u < tau)/E[N_u] at finite u. Both expectations carry the same
    dual weight and vanish off the hit branch, so a common shift is safe."""
    rows = []
    s = as_stream(stream).child("theta-finite-u")
    for u in u_levels:
        b = simulate_dual(model, regen, xi, u, n_cycles, s, mapper=mapper)
        lw, hit = dual_logweights(b, xi)
        c = float(lw[hit].max()) if hit.any() else 0.0
        w = np.where(hit, np.exp(lw - c), 0.0)
        r, se = ratio_same_sample(w, w * b.Nu[:, 0])
        rows.append({"u": float(u), "ratio": r, "stderr": se, "hit_fraction": float(hit.mean())})
    return rows


def decompose_C(comp: CComponents, ladder: LadderStats) -> dict:
    """C = C* . theta . E_xi[(Zp-Zc)^xi 1{tau=inf}] with
    theta = E[tau*] / (E[tau] (1 - E[exp(xi S_tau*)]))."""
    cstar = ladder.cstar(comp.lambda_prime)
    theta = ladder.tau_star.value / (comp.E_tau.value * ladder.one_minus_E.value)
    product = cstar.value * theta * comp.numerator.value
    direct = comp.C.value
    return {"C": direct, "Cstar": cstar.value, "theta": theta, "numerator": comp.numerator.value,
            "product": product, "rel_gap": abs(product - direct) / abs(direct) if direct else math.inf}


# ---------------------------------------------------------------------------
# Lundberg-type bound


def sup_closed_form(C1: float, C2: float, xi: float) -> float:
    """sup_{z >= 0} exp(-xi z)(z C1 + C2)."""
    if C1 < 0 or C2 < 0 or xi <= 0:
        raise InvalidParams("need C1, C2 >= 0 and xi > 0")
    if xi * C2 >= C1:
        return C2
    z = 1.0 / xi - C2 / C1
    return (C1 / xi) * math.exp(-xi * z)


def _sup_grad(C1: float, C2: float, xi: float) -> tuple[float, float]:
    if xi * C2 >= C1:
        return 0.0, 1.0
    z = 1.0 / xi - C2 / C1
    e = math.exp(-xi * z)
    return e * z, e


@dataclass
class LundbergConstants:
    u: float
    t: float
    m_u: float
    m_u_se: float
    sigma2_u: float
    C1: float
    C1_se: float
    C2: float
    C2_se: float
    Delta: float
    alpha: float
    rho: float
    M: float
    sup_tau: float
    vbar_moment: float
    zbar_moment: float
    zbar_moment_se: float
    sup_value: float
    Cbar: float
    Cbar_se: float
    bound: float
    bound_conservative: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LundbergResult:
    xi: float
    rows: list[LundbergConstants]
    limits: dict
    drift: DriftParams

    def to_dict(self) -> dict:
        return {"xi": self.xi, "rows": [r.to_dict() for r in self.rows], "limits": self.limits,
                "drift": asdict(self.drift)}


def _xu_moments(logA, absB, absAD, u, t, nb=50):
    x = np.log(np.exp(logA) + u ** (-t) * (absAD + absB))
    k = nb
    m = len(x) // k
    xb = x[: m * k].reshape(k, m)
    mb = xb.mean(axis=1)
    vb = xb.var(axis=1)
    mean = float(x.mean())
    var = float(x.var())
    g1 = 1.0 / np.abs(mb)
    g2 = vb / mb**2
    se = lambda a: float(a.std(ddof=1) / math.sqrt(k))
    return mean, se(mb), var, 1.0 / abs(mean), se(g1), var / mean**2, se(g2)


def lundberg_bound(model: ModelSpec, regen: RegenScheme, u_grid: Sequence[float], stream: Stream | int | None = None,
                   xi: float | None = None, t: float = 0.5, n_x: int = 200_000, n_w: int = 33,
                   n_w_cycles: int = 2_000, n_zbar_cycles: int = 20_000, n_vbar: int = 200_000,
                   drift: DriftParams | None = None, mapper=None) -> LundbergResult:
    """Constants of the finite-u bound P(V > u) <= Cbar(u) u^-xi for Letac E
    type models. The X^(u) moments share one set of draws across u."""
    if model.kind not in ("LetacE", "Ruin", "Linear"):
        raise UnsupportedKind(f"the bound is for Letac E type models, not {model.kind}")
    if not 0 < t < 1:
        raise InvalidParams("t must be in (0, 1)")
    if xi is None:
        xi = solve_xi(cumulant(model.driver)).xi
    s = as_stream(stream).child("lundberg")
    drift = drift or compute_drift_params(model, xi)
    a, rho, M = drift.alpha, drift.rho, drift.M

    d = model.sample(s.generator(0), n_x)
    absB = np.abs(d.B)
    absAD = np.zeros(n_x) if model.kind == "Linear" else np.exp(d.logA) * np.abs(d.D)

    # sup over w in [-M, M] of E_w[tau]
    lo = max(-M, model.state_lower())
    ws = np.linspace(lo, M, n_w)
    sup_tau = 0.0
    for i, w in enumerate(ws):
        ob = simulate_cycles(model, regen, n_w_cycles, s.child("w").child(str(i)), EngineConfig(v0=float(w)),
                             mapper=mapper)
        m, se = batch_means(ob.tau.astype(float))
        sup_tau = max(sup_tau, m + 2 * se)

    # E_M[Vbar_1^alpha], Vbar_1 = A max(D, M) + |B|
    dv = model.sample(s.generator(1), n_vbar)
    if model.kind == "Linear":
        vbar = np.exp(dv.logA) * M + np.abs(dv.B)
    else:
        vbar = np.exp(dv.logA) * np.maximum(dv.D, M) + np.abs(dv.B)
    vbar_moment = float(np.mean(np.abs(vbar) ** a))

    # E_xi[Zbar^xi] over shifted cycles
    sb = simulate_cycles(model, regen, n_zbar_cycles, s.child("zbar"),
                         EngineConfig(measure="shifted", xi=xi, track_zbar=True), mapper=mapper)
    zm, zse = batch_means(sb.zbar**xi)

    m0, v0 = model.driver.logA_moments()
    dt = model.driver.impl.sample(s.generator(2), n_x, xi).logA
    limits = {
        "m": m0, "sigma2": v0, "C1": 1.0 / abs(m0), "C2": 1.0 + v0 / m0**2,
        "m_tilted": float(dt.mean()), "sigma2_tilted": float(dt.var()),
        "C1_tilted": 1.0 / abs(float(dt.mean())), "C2_tilted": 1.0 + float(dt.var()) / float(dt.mean()) ** 2,
    }

    rows = []
    for u in u_grid:
        u = float(u)
        if u <= 0:
            raise InvalidParams("u must be positive")
        mu_, mse, var, C1, C1se, g2, g2se = _xu_moments(d.logA, absB, absAD, u, t)
        if mu_ >= 0:
            log.warning("E[X^(u)] >= 0 at u=%g; the bound is not available", u)
            continue
        Delta = u ** (-a * (1.0 - t)) / (1.0 - rho) * (1.0 + u ** (-a * t) * sup_tau * vbar_moment)
        C2 = 1.0 + g2 + Delta
        sup = sup_closed_form(C1, C2, xi)
        g_1, g_2 = _sup_grad(C1, C2, xi)
        sup_se = math.hypot(g_1 * C1se, g_2 * g2se)
        cbar = zm * sup
        cbar_se = cbar * math.hypot(zse / zm, sup_se / sup)
        bound = cbar * u ** (-xi)
        rows.append(LundbergConstants(u, t, mu_, mse, var, C1, C1se, C2, g2se, Delta, a, rho, M, sup_tau,
                                      vbar_moment, zm, zse, sup, cbar, cbar_se, bound,
                                      (cbar + 2 * cbar_se) * u ** (-xi)))
    return LundbergResult(xi, rows, limits, drift)


# ---------------------------------------------------------------------------
# tail curve


def tail_curve(model: ModelSpec, regen: RegenScheme, u_grid: Sequence[float], method: str = "dual",
               stream: Stream | int | None = None, xi: float | None = None, n_cycles: int = 20_000,
               n_tau_cycles: int | None = None, C_hat: float | None = None,
               lundberg: LundbergResult | None = None, mapper=None) -> list[dict]:
    """P(V > u) on a grid, with u^xi P(V > u) next to C_hat and the bound."""
    if xi is None:
        xi = solve_xi(cumulant(model.driver)).xi
    s = as_stream(stream).child("tail")
    u_grid = [float(u) for u in u_grid]
    bounds = {}
    if lundberg is not None:
        bounds = {r.u: r.bound for r in lundberg.rows}
    rows = []
    if method == "crude":
        ob = simulate_cycles(model, regen, n_cycles, s.child("crude"), EngineConfig(u_levels=tuple(u_grid)),
                             mapper=mapper)
        est = cycle_stats(ob).p_hat
    elif method == "dual":
        ob = simulate_cycles(model, regen, n_tau_cycles or n_cycles, s.child("tau"), EngineConfig(), mapper=mapper)
        mt, st = batch_means(ob.tau.astype(float))
        e_tau = Estimate(mt, st, len(ob), {"quantity": "E[tau]"})
        est = [importance_tail_estimate(model, regen, xi, u, n_cycles, s.child("dual"), tau_estimate=e_tau,
                                        mapper=mapper) for u in u_grid]
    else:
        raise InvalidParams(f"unknown method {method!r}")
    for u, e in zip(u_grid, est):
        rows.append({
            "u": u,
            "p_hat": e.value,
            "stderr": e.stderr,
            "u_xi_p": e.value * u**xi,
            "u_xi_p_se": e.stderr * u**xi,
            "C_hat": math.nan if C_hat is None else C_hat,
            "lundberg": bounds.get(u, math.nan),
            "method": method,
        })
    return rows
