"""Minorization schemes, regeneration cycles and cycle statistics.

Three schemes are available:

* ``atom``: C = {v <= level} where F_Y(v) does not depend on v below the
  level (Ruin at 0, Letac E with constant D at D). delta = 1 and the
  chain regenerates on every visit.
* ``smallset``: C = [lo, hi]; nu_hat(x) = min over v in C of the transition
  density h_v(x), on a 512-point grid.
* ``user``: delta, bounds and a nu density/sampler supplied by the caller.

For smallset and user schemes regeneration is decided retrospectively:
at a visit to C a uniform U is drawn, then the transition draw, and the
chain regenerates if U < nu_hat(V') / h_v(V'). Conditional on regenerating,
V' has law nu whatever v was, and the rule is a fixed function of the path
and the uniforms, so it is the same under every change of measure on the
driving sequence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .drivers import Draws, cumulant, solve_xi
from .errors import (
    CycleOverrun,
    DegenerateMinorization,
    DriftParamsFailed,
    EmptyInput,
    InvalidParams,
    NoRoot,
    NonFiniteState,
    UnsupportedKind,
)
from .rng import DEFAULT_BLOCK, Stream, as_stream, run_blocks
from .sfpe_core import ModelSpec
from .stats import Estimate, batch_means, ratio_same_sample

log = logging.getLogger(__name__)

GRID_X = 512
GRID_V = 64
SAFETY = 0.95
DELTA_FLOOR = 1e-4
CAP_ORIGINAL = 10_000_000
CAP_SHIFTED = 100_000
ESC_FACTOR = 1e6
ESC_S = 50.0


# ---------------------------------------------------------------------------
# drift parameters


@dataclass(frozen=True)
class DriftParams:
    alpha: float
    rho: float
    M: float
    lam_alpha: float


def compute_drift_params(model: ModelSpec, xi: float | None = None, n: int = 200_000,
                         seed: int = 7, grid: int = 100) -> DriftParams:
    """alpha maximising 1 - E[A^alpha] over a grid in (0, min(xi, 1)],
    rho = (E[A^alpha] + 1)/2 and the smallest M with
    (1/2)(1 - E[A^alpha]) M^alpha >= E|B|^alpha + E(A|D|)^alpha."""
    cum = cumulant(model.driver)
    if xi is None:
        try:
            xi = solve_xi(cum).xi
        except NoRoot:
            xi = math.inf
    top = min(xi, 1.0)
    alphas = np.linspace(0.0, top, grid + 1)[1:]
    if xi <= 1.0:
        alphas = alphas[:-1]
    lams = np.array([cum.lam(a) for a in alphas])
    ok = lams < 1
    if not ok.any():
        raise DriftParamsFailed("no alpha in the grid with E[A^alpha] < 1")
    i = int(np.argmin(np.where(ok, lams, np.inf)))
    alpha, lam = float(alphas[i]), float(lams[i])
    d = model.sample(np.random.default_rng(seed), n)
    A = np.exp(d.logA)
    eb = float(np.mean(np.abs(d.B) ** alpha))
    ed = 0.0 if model.kind == "Linear" else float(np.mean((A * np.abs(d.D)) ** alpha))
    rho = 0.5 * (lam + 1.0)
    rhs = eb + ed
    M = (2.0 * rhs / (1.0 - lam)) ** (1.0 / alpha) if rhs > 0 else 0.0
    return DriftParams(alpha, rho, float(M), lam)


# ---------------------------------------------------------------------------
# schemes


@dataclass(eq=False)
class RegenScheme:
    kind: str
    model: ModelSpec
    level: float = 0.0
    bounds: tuple[float, float] = (-math.inf, math.inf)
    delta: float = 1.0
    x_grid: np.ndarray | None = None
    envelope: np.ndarray | None = None
    nu_density: Callable | None = None
    nu_sampler_fn: Callable | None = None
    info: dict = field(default_factory=dict)

    @property
    def hi(self) -> float:
        return self.level if self.kind == "atom" else self.bounds[1]

    def in_c(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "atom":
            return v <= self.level
        lo, hi = self.bounds
        return (v >= lo) & (v <= hi)

    def nu_hat(self, x: np.ndarray) -> np.ndarray:
        """Unnormalised minorizing measure delta * nu(x)."""
        if self.kind == "smallset":
            xg = self.x_grid
            seg = np.searchsorted(xg, x, side="right") - 1
            inside = (seg >= 0) & (seg < len(xg) - 1)
            return np.where(inside, self.envelope[np.clip(seg, 0, len(xg) - 2)], 0.0)
        if self.kind == "user":
            return self.delta * np.asarray(self.nu_density(x), dtype=float)
        raise UnsupportedKind("atom scheme has no density")

    def regen_prob(self, v: np.ndarray, x: np.ndarray) -> np.ndarray:
        h = self.model.transition_density(v, x)
        num = self.nu_hat(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(h > 0, num / h, np.where(num > 0, np.inf, 0.0))
        return r

    def sample_nu(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "atom":
            d = self.model.sample(rng, n)
            return self.model.apply(np.full(n, self.level), d)
        if self.kind == "user":
            return np.asarray(self.nu_sampler_fn(rng, n), dtype=float)
        return sample_piecewise_constant(rng, n, self.x_grid, self.envelope)

    def describe(self) -> dict:
        out = {"kind": self.kind, "delta": self.delta}
        if self.kind == "atom":
            out["level"] = self.level
        else:
            out["bounds"] = list(self.bounds)
        out.update(self.info)
        return out


def sample_piecewise_constant(rng: np.random.Generator, n: int, xg: np.ndarray, yg: np.ndarray) -> np.ndarray:
    """Exact draws from the step density equal to yg[i] on [xg[i], xg[i+1])."""
    h = np.diff(xg)
    mass = yg * h
    cdf = np.cumsum(mass)
    u1 = rng.random(n) * cdf[-1]
    seg = np.minimum(np.searchsorted(cdf, u1, side="right"), len(mass) - 1)
    return xg[seg] + rng.random(n) * h[seg]


def _pilot_states(model: ModelSpec, n: int = 4000, steps: int = 300, seed: int = 11) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = np.zeros(n) if model.kind != "LetacE" else np.full(n, 1.0)
    lo = model.state_lower()
    if math.isfinite(lo):
        v = np.full(n, max(lo, 0.0) + 1.0)
    for _ in range(steps):
        v = model.apply(v, model.sample(rng, n))
    return v


def _default_scheme(model: ModelSpec) -> str:
    if model.kind == "Ruin":
        return "atom"
    impl = model.driver.impl
    if model.kind == "LetacE" and getattr(impl, "D", None) is not None and impl.D.is_constant:
        if model.state_lower() < impl.D.value:
            return "atom"
    return "smallset"


def make_regen(model: ModelSpec, config: Mapping | None = None) -> RegenScheme:
    """Build the regeneration scheme for a model.

    config keys: scheme (auto|atom|smallset|user), level, lo, hi, safety,
    grid_x, grid_v, delta_floor, and for user: delta, nu_density, nu_sampler.
    """
    cfg = dict(config or {})
    kind = cfg.get("scheme", "auto")
    if kind == "auto":
        kind = _default_scheme(model)
    if kind == "atom":
        if model.kind == "Ruin":
            level = float(cfg.get("level", 0.0))
        else:
            impl = model.driver.impl
            if model.kind != "LetacE" or impl.D is None or not impl.D.is_constant:
                raise UnsupportedKind("atom scheme needs Ruin or Letac E with constant D")
            level = float(cfg.get("level", impl.D.value))
            if level > impl.D.value:
                raise InvalidParams("atom level must not exceed the constant D")
        return RegenScheme("atom", model, level=level, delta=1.0)
    if kind == "user":
        for key in ("delta", "nu_density", "nu_sampler"):
            if key not in cfg:
                raise InvalidParams(f"user scheme needs {key}")
        lo, hi = float(cfg.get("lo", -math.inf)), float(cfg["hi"])
        sch = RegenScheme("user", model, bounds=(lo, hi), delta=float(cfg["delta"]),
                          nu_density=cfg["nu_density"], nu_sampler_fn=cfg["nu_sampler"])
        if cfg.get("validate", True):
            sch.info["validation"] = validate_minorization(sch)
        return sch
    if kind != "smallset":
        raise UnsupportedKind(f"unknown scheme {kind!r}")
    return _make_smallset(model, cfg)


def _make_smallset(model: ModelSpec, cfg: Mapping) -> RegenScheme:
    impl = model.driver.impl
    if not impl.has_density:
        raise DegenerateMinorization(f"driver {impl.name} has no A-density; supply a user scheme")
    safety = float(cfg.get("safety", SAFETY))
    nx = int(cfg.get("grid_x", GRID_X))
    nv = int(cfg.get("grid_v", GRID_V))
    floor = float(cfg.get("delta_floor", DELTA_FLOOR))
    hi = cfg.get("hi")
    if hi is None:
        hi = compute_drift_params(model).M
    hi = float(hi)
    lo = cfg.get("lo")
    if lo is None:
        lo = model.state_lower()
        if model.kind == "LetacE" and impl.D.is_constant:
            lo = -math.inf if not math.isfinite(lo) else lo
            lo = min(lo, impl.D.value)
        if not math.isfinite(lo) or (model.kind != "LetacE" and lo <= 0):
            pilot = _pilot_states(model)
            lo = float(np.quantile(pilot, 0.01))
    lo = float(lo)
    if not lo < hi:
        raise DegenerateMinorization(f"empty small set [{lo}, {hi}]")
    # scale range of the transition over C
    if model.kind == "LetacE":
        d = impl.D.value
        s_lo, s_hi = max(d, lo), max(d, hi)
        v_grid = np.linspace(s_lo, s_hi, nv) if s_hi > s_lo else np.array([s_lo])
    else:
        s_lo, s_hi = lo, hi
        v_grid = np.linspace(lo, hi, nv)
    if s_lo <= 0:
        raise DegenerateMinorization("small set touches nonpositive scale; raise lo")
    rng = np.random.default_rng(int(cfg.get("seed", 3)))
    dr = model.sample(rng, 20_000)
    x_lo = model.apply(np.full(len(dr), v_grid[0]), dr)
    x_hi = model.apply(np.full(len(dr), v_grid[-1]), dr)
    a = max(np.quantile(x_hi, 1e-4), np.quantile(x_lo, 1e-4))
    b = min(np.quantile(x_lo, 0.9999), np.quantile(x_hi, 0.9999))
    if not a < b:
        raise DegenerateMinorization("transition laws over C do not overlap")
    # grid points spaced by pooled quantiles so resolution follows the mass
    pooled = np.concatenate([x_lo, x_hi])
    pooled = pooled[(pooled > a) & (pooled < b)]
    xg = np.unique(np.concatenate([[a, b], np.quantile(pooled, np.linspace(0, 1, nx))])) if len(pooled) else np.linspace(a, b, nx)
    h = model.transition_density(v_grid[:, None], xg[None, :])
    node = h.min(axis=0)
    node[~np.isfinite(node)] = 0.0
    # step envelope: smaller endpoint value on each cell
    env = safety * np.minimum(node[:-1], node[1:])
    delta = float(np.sum(env * np.diff(xg)))
    if delta < floor:
        raise DegenerateMinorization(f"delta={delta:.3g} below floor {floor:g}; try a smaller hi")
    return RegenScheme("smallset", model, bounds=(lo, hi), delta=delta, x_grid=xg, envelope=env,
                       info={"safety": safety, "grid_x": nx, "grid_v": nv})


def validate_minorization(scheme: RegenScheme, n_v: int = 8, n: int = 20_000, seed: int = 5) -> dict:
    """Empirical check of delta*nu(E) <= P(v, E) over histogram bins E for
    v on a grid in C. Returns the worst ratio and the number of failing
    (v, bin) pairs beyond 4 binomial standard errors."""
    rng = np.random.default_rng(seed)
    lo, hi = scheme.bounds
    lo = lo if math.isfinite(lo) else hi - 1.0
    nu = scheme.sample_nu(rng, n)
    edges = np.quantile(nu, np.linspace(0, 1, 21))
    edges[0], edges[-1] = -np.inf, np.inf
    nu_frac = scheme.delta * np.histogram(nu, edges)[0] / n
    worst, fails = 0.0, 0
    for v in np.linspace(lo, hi, n_v):
        x = scheme.model.apply(np.full(n, v), scheme.model.sample(rng, n))
        p = np.histogram(x, edges)[0] / n
        se = np.sqrt(np.maximum(p * (1 - p), 1.0 / n) / n)
        fails += int(np.sum(nu_frac > p + 4 * se))
        with np.errstate(divide="ignore", invalid="ignore"):
            worst = max(worst, float(np.nanmax(np.where(p > 0, nu_frac / p, 0.0))))
    if fails:
        log.warning("user minorization violated in %d (v, bin) pairs", fails)
    return {"worst_ratio": worst, "violations": fails}


# ---------------------------------------------------------------------------
# cycle engine


@dataclass
class EngineConfig:
    measure: str = "original"  # original | shifted | dual
    xi: float = 0.0
    u_levels: tuple[float, ...] = ()
    dual_index: int = 0
    v0: float | np.ndarray | None = None
    retain: bool = False
    track_backward: bool = False
    track_zbar: bool = False
    track_poly: bool = False
    stop_at_hit: bool = False
    esc_level: float | None = None
    esc_S: float = ESC_S
    cap: int | None = None
    alpha_override: float | None = None
    collect_states: bool = False

    def resolved_cap(self) -> int:
        if self.cap is not None:
            return int(self.cap)
        return CAP_ORIGINAL if self.measure == "original" else CAP_SHIFTED


@dataclass
class CyclePath:
    states: np.ndarray
    S: np.ndarray
    logA: np.ndarray
    B: np.ndarray
    D: np.ndarray
    tags: np.ndarray
    tau: float
    tau_inf: bool
    undecided: bool
    Tu: int | None
    Nu: int
    u: float | None
    measure_tag: str
    S_end: float
    extra: np.ndarray | None = None

    def recount(self, u: float) -> int:
        n = len(self.states) if not math.isfinite(self.tau) else int(self.tau)
        return int(np.sum(self.states[:n] > u))


@dataclass
class CycleBatch:
    measure: str
    u_levels: np.ndarray
    tau: np.ndarray
    tau_inf: np.ndarray
    undecided: np.ndarray
    Nu: np.ndarray
    Tu: np.ndarray
    STu: np.ndarray
    VTu: np.ndarray
    S_end: np.ndarray
    V0: np.ndarray
    V_end: np.ndarray
    steps: np.ndarray
    zp: np.ndarray | None = None
    zc: np.ndarray | None = None
    zbar: np.ndarray | None = None
    poly: np.ndarray | None = None
    violations: int = 0
    regen_checks: int = 0
    paths: list | None = None
    S_end_state: np.ndarray | None = None
    states: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tau)

    @property
    def zdiff(self) -> np.ndarray:
        return self.zp - self.zc

    @property
    def ztilde_end(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.V_end * np.exp(-self.S_end_state)

    @staticmethod
    def concat(parts: Sequence["CycleBatch"]) -> "CycleBatch":
        if not parts:
            raise EmptyInput("no cycles")
        p0 = parts[0]
        out = {}
        for name in ("tau", "tau_inf", "undecided", "Nu", "Tu", "STu", "VTu", "S_end", "V0", "V_end",
                     "steps", "zp", "zc", "zbar", "poly", "S_end_state"):
            vals = [getattr(p, name) for p in parts]
            out[name] = None if vals[0] is None else np.concatenate(vals)
        paths = None
        if p0.paths is not None:
            paths = [c for p in parts for c in p.paths]
        states = None if p0.states is None else np.concatenate([p.states for p in parts])
        return CycleBatch(p0.measure, p0.u_levels, violations=sum(p.violations for p in parts),
                          regen_checks=sum(p.regen_checks for p in parts), paths=paths, states=states, **out)


def _draws(model: ModelSpec, rng, n: int, tilted: np.ndarray | None, xi: float) -> Draws:
    """Draws for the active set; ``tilted`` marks which use the shifted law."""
    if tilted is None or not tilted.any():
        return model.sample(rng, n, 0.0)
    if tilted.all():
        return model.sample(rng, n, xi)
    k = int(tilted.sum())
    d1 = model.sample(rng, k, xi)
    d0 = model.sample(rng, n - k, 0.0)
    out = Draws(np.empty(n), np.empty(n), np.empty(n), None, None)
    for name in ("logA", "B", "D"):
        arr = getattr(out, name)
        arr[tilted] = getattr(d1, name)
        arr[~tilted] = getattr(d0, name)
    if d1.ac is not None or d0.ac is not None:
        ac = np.ones(n, dtype=bool)
        if d1.ac is not None:
            ac[tilted] = d1.ac
        if d0.ac is not None:
            ac[~tilted] = d0.ac
        out.ac = ac
    if d1.extra is not None:
        ex = np.empty((d1.extra.shape[0], n))
        ex[:, tilted] = d1.extra
        ex[:, ~tilted] = d0.extra
        out.extra = ex
    return out


def simulate_block(model: ModelSpec, regen: RegenScheme, cfg: EngineConfig,
                   rng: np.random.Generator, size: int) -> CycleBatch:
    """Run ``size`` cycles in lockstep. All cycles start at step 0 so one
    step counter serves the whole active set."""
    meas = cfg.measure
    if meas not in ("original", "shifted", "dual"):
        raise InvalidParams(f"unknown measure {meas!r}")
    xi = cfg.alpha_override if cfg.alpha_override is not None else cfg.xi
    u = np.asarray(cfg.u_levels, dtype=float)
    nu_ = len(u)
    jd = cfg.dual_index
    if meas == "dual" and nu_ == 0:
        raise InvalidParams("dual measure needs a level u")
    kind_atom = regen.kind == "atom"
    lin = model.kind == "Linear"
    poly = model.kind == "Polynomial"
    esc_level = cfg.esc_level if cfg.esc_level is not None else ESC_FACTOR * max(1.0, regen.hi)
    esc_S = cfg.esc_S * (model.k if poly else 1)
    cap = cfg.resolved_cap()

    # per-cycle outputs
    tau = np.full(size, np.inf)
    tau_inf = np.zeros(size, dtype=bool)
    undecided = np.zeros(size, dtype=bool)
    Nu = np.zeros((size, nu_), dtype=np.int64)
    Tu = np.full((size, nu_), -1, dtype=np.int64)
    STu = np.full((size, nu_), np.nan)
    VTu = np.full((size, nu_), np.nan)
    S_end = np.full(size, np.nan)
    S_end_state = np.full(size, np.nan)
    V_end = np.full(size, np.nan)
    steps = np.zeros(size, dtype=np.int64)
    zp_out = np.full(size, np.nan) if cfg.track_backward else None
    zc_out = np.full(size, np.nan) if cfg.track_backward else None
    zbar_out = np.full(size, np.nan) if cfg.track_zbar else None
    poly_out = np.full(size, np.nan) if cfg.track_poly else None

    if cfg.v0 is None:
        V = regen.sample_nu(rng, size)
    elif np.ndim(cfg.v0) == 0:
        V = np.full(size, float(cfg.v0))
    else:
        V = np.asarray(cfg.v0, dtype=float)[:size].copy()
    V0 = V.copy()
    idx = np.arange(size)
    S = np.zeros(size)
    zp = V.copy()
    zcomp = np.zeros(size)
    mterm = np.full(size, np.inf)
    zbar = np.abs(V)
    pser = V.copy()
    violations = 0
    checks = 0
    rec = [] if cfg.retain else None
    pooled = [] if cfg.collect_states else None

    def finish(mask, tau_val, S_val, inf_flag=False, und_flag=False):
        ids = idx[mask]
        tau[ids] = tau_val
        tau_inf[ids] = inf_flag
        undecided[ids] = und_flag
        S_end[ids] = S_val[mask] if np.ndim(S_val) else S_val
        S_end_state[ids] = S[mask]
        V_end[ids] = V[mask]
        steps[ids] = n
        if zp_out is not None:
            z = zp[mask] + zcomp[mask]
            zp_out[ids] = z
            zc = np.minimum(z, 0.0)
            if not lin:
                zc = np.minimum(zc, mterm[mask])
            zc_out[ids] = zc
        if zbar_out is not None:
            zbar_out[ids] = zbar[mask]
        if poly_out is not None:
            poly_out[ids] = pser[mask]

    n = 0
    while len(idx):
        # 1. exceedances of the current state
        if nu_:
            exc = V[:, None] > u[None, :]
            Nu[idx] += exc
            newhit = exc & (Tu[idx] < 0)
            if newhit.any():
                r, c = np.nonzero(newhit)
                Tu[idx[r], c] = n
                STu[idx[r], c] = S[r]
                VTu[idx[r], c] = V[r]
        # 2. terminations that precede the transition
        stop = np.zeros(len(idx), dtype=bool)
        if cfg.stop_at_hit and nu_:
            hit = Tu[idx, jd] >= 0
            if hit.any():
                finish(hit, np.nan, S)
                stop |= hit
        if meas == "shifted":
            # a dual cycle in its tilted phase always ends by hitting u or
            # regenerating, so only fully shifted cycles need the detector
            esc = (V > esc_level) & (S > esc_S) & ~stop
            if esc.any():
                finish(esc, np.inf, S, inf_flag=True)
                stop |= esc
        if n >= cap:
            if meas == "original":
                raise CycleOverrun(f"cycle exceeded {cap} steps under the original measure")
            rest = ~stop
            finish(rest, np.inf, S, und_flag=True)
            stop |= rest
        if stop.any():
            keep = ~stop
            idx, V, S, zp, zcomp, mterm, zbar, pser = (
                a[keep] for a in (idx, V, S, zp, zcomp, mterm, zbar, pser))
            if not len(idx):
                break
        m = len(idx)
        if pooled is not None:
            pooled.append(V.copy())
        # 3. regeneration coin (smallset/user) then the transition draw
        inC = regen.in_c(V)
        U = rng.random(int(inC.sum())) if not kind_atom else None
        if meas == "original":
            tilted = None
        elif meas == "shifted":
            tilted = np.ones(m, dtype=bool)
        else:
            tilted = Tu[idx, jd] < 0
        d = _draws(model, rng, m, tilted, xi)
        Vn = model.apply(V, d)
        if not np.all(np.isfinite(Vn)):
            raise NonFiniteState(f"non-finite state at step {n + 1}")
        Snew = S + d.logA
        if kind_atom:
            end = inC
        else:
            end = np.zeros(m, dtype=bool)
            if inC.any():
                ci = np.nonzero(inC)[0]
                r = regen.regen_prob(V[ci], Vn[ci])
                if d.ac is not None:
                    r = np.where(d.ac[ci], r, 0.0)
                checks += len(ci)
                violations += int(np.sum(r > 1.0))
                end[ci] = U < r
        if rec is not None:
            rec.append((idx.copy(), n, V.copy(), S.copy(), d, tilted))
        if end.any():
            finish(end, n + 1, Snew)
        cont = ~end
        # 4. accumulators with draw n+1 for continuing cycles
        if cfg.track_backward or cfg.track_zbar or cfg.track_poly:
            with np.errstate(over="ignore"):
                disc_new = np.exp(-Snew)
            if cfg.track_backward:
                if not lin:
                    with np.errstate(over="ignore", invalid="ignore"):
                        mterm = np.minimum(mterm, (zp + zcomp) - d.D * np.exp(-S))
                t = d.B * disc_new
                s = zp + t
                big = np.abs(zp) >= np.abs(t)
                zcomp = zcomp + np.where(big, (zp - s) + t, (t - s) + zp)
                zp = s
            if cfg.track_zbar:
                dd = 0.0 if lin else np.abs(d.D)
                zbar = zbar + (np.abs(d.B) + np.exp(d.logA) * dd) * disc_new
            if cfg.track_poly:
                g = model.G(V, d) if poly else d.B
                pser = pser + g * disc_new
        idx, V, S, zp, zcomp, mterm, zbar, pser = (
            a[cont] for a in (idx, Vn, Snew, zp, zcomp, mterm, zbar, pser))
        n += 1

    paths = _build_paths(rec, size, tau, tau_inf, undecided, Tu, Nu, u, meas, S_end, jd) if rec is not None else None
    return CycleBatch(meas, u, tau, tau_inf, undecided, Nu, Tu, STu, VTu, S_end, V0, V_end, steps,
                      zp_out, zc_out, zbar_out, poly_out, violations, checks, paths, S_end_state,
                      None if pooled is None else np.concatenate(pooled) if pooled else np.empty(0))


def _build_paths(rec, size, tau, tau_inf, undecided, Tu, Nu, u, meas, S_end, jd):
    states = [[] for _ in range(size)]
    Ss = [[] for _ in range(size)]
    dr = [[] for _ in range(size)]
    for ids, n, V, S, d, tilted in rec:
        for j, c in enumerate(ids):
            states[c].append(V[j])
            Ss[c].append(S[j])
            ex = None if d.extra is None else d.extra[:, j]
            dr[c].append((d.logA[j], d.B[j], d.D[j], True if tilted is None else bool(tilted[j]) if meas != "original" else False, ex))
    # the final state of an escaped/stopped cycle was recorded without a draw
    out = []
    for c in range(size):
        st = np.array(states[c])
        rows = dr[c]
        if meas == "original":
            tags = np.zeros(len(rows), dtype=bool)
        else:
            tags = np.array([r[3] for r in rows], dtype=bool)
        tu = int(Tu[c, jd]) if Tu.shape[1] and Tu[c, jd] >= 0 else None
        extra = None
        if rows and rows[0][4] is not None:
            extra = np.stack([r[4] for r in rows], axis=1)
        out.append(CyclePath(
            states=st,
            S=np.array(Ss[c]),
            logA=np.array([r[0] for r in rows]),
            B=np.array([r[1] for r in rows]),
            D=np.array([r[2] for r in rows]),
            tags=tags,
            tau=float(tau[c]),
            tau_inf=bool(tau_inf[c]),
            undecided=bool(undecided[c]),
            Tu=tu,
            Nu=int(Nu[c, jd]) if Nu.shape[1] else 0,
            u=float(u[jd]) if len(u) else None,
            measure_tag=meas,
            S_end=float(S_end[c]),
            extra=extra,
        ))
    return out


def _block_task(model, regen, cfg, rng, size):
    return simulate_block(model, regen, cfg, rng, size)


def simulate_cycles(model: ModelSpec, regen: RegenScheme, n_cycles: int, stream: Stream | int | None,
                    cfg: EngineConfig | None = None, block: int = DEFAULT_BLOCK, mapper=None) -> CycleBatch:
    """Simulate ``n_cycles`` independent cycles, one substream per block."""
    if n_cycles <= 0:
        raise EmptyInput("n_cycles must be positive")
    cfg = cfg or EngineConfig()
    parts = run_blocks(_block_task, as_stream(stream).child("cycles").child(cfg.measure),
                       n_cycles, (model, regen, cfg), block, mapper)
    return CycleBatch.concat(parts)


def run_cycle(model: ModelSpec, regen: RegenScheme, measure: str = "original", u: float | None = None,
              stream: Stream | int | None = None, xi: float = 0.0, **kw) -> CyclePath:
    """One cycle with its path retained."""
    cfg = EngineConfig(measure=measure, xi=xi, u_levels=() if u is None else (float(u),), retain=True, **kw)
    rng = as_stream(stream).child("single").generator(0)
    return simulate_block(model, regen, cfg, rng, 1).paths[0]


# ---------------------------------------------------------------------------
# statistics over cycles


@dataclass
class CycleStats:
    E_tau: Estimate
    E_Nu: list[Estimate]
    p_hat: list[Estimate]
    p_hit: list[Estimate]

    def to_dict(self) -> dict:
        return {
            "E_tau": self.E_tau.to_dict(),
            "E_Nu": [e.to_dict() for e in self.E_Nu],
            "p_hat": [e.to_dict() for e in self.p_hat],
            "p_hit": [e.to_dict() for e in self.p_hit],
        }


def cycle_stats(cycles: CycleBatch | Sequence[CyclePath], u_levels: Sequence[float] | None = None,
                n_batches: int = 50) -> CycleStats:
    """E[tau], E[N_u], P(V>u) = E[N_u]/E[tau] and P(T_u < tau)."""
    if isinstance(cycles, CycleBatch):
        tau = cycles.tau.astype(float)
        Nu = cycles.Nu.astype(float)
        Tu = cycles.Tu
        u = cycles.u_levels
    else:
        cycles = list(cycles)
        if not cycles:
            raise EmptyInput("no cycles")
        u = np.asarray(u_levels if u_levels is not None else [cycles[0].u], dtype=float)
        tau = np.array([c.tau for c in cycles], dtype=float)
        Nu = np.array([[c.recount(x) for x in u] for c in cycles], dtype=float)
        Tu = np.where(Nu > 0, 0, -1)
    if len(tau) == 0:
        raise EmptyInput("no cycles")
    if not np.all(np.isfinite(tau)):
        raise InvalidParams("cycle_stats needs finite cycles (original measure)")
    m, se = batch_means(tau, n_batches)
    e_tau = Estimate(m, se, len(tau), {"quantity": "E[tau]"})
    e_nu, p_hat, p_hit = [], [], []
    for j, lev in enumerate(u):
        mn, sn = batch_means(Nu[:, j], n_batches)
        e_nu.append(Estimate(mn, sn, len(tau), {"quantity": "E[N_u]", "u": float(lev)}))
        r, sr = ratio_same_sample(Nu[:, j], tau, n_batches)
        p_hat.append(Estimate(r, sr, len(tau), {"quantity": "P(V>u)", "u": float(lev)}))
        h, sh = batch_means((Tu[:, j] >= 0).astype(float), n_batches)
        p_hit.append(Estimate(h, sh, len(tau), {"quantity": "P(T_u<tau)", "u": float(lev)}))
    return CycleStats(e_tau, e_nu, p_hat, p_hit)


def stationary_sample(model: ModelSpec, regen: RegenScheme, n_cycles: int, stream, mapper=None) -> np.ndarray:
    """All states visited by ``n_cycles`` original-measure cycles. Pooled,
    they are a sample from the stationary law (cycle representation)."""
    cb = simulate_cycles(model, regen, n_cycles, as_stream(stream).child("stationary"),
                         EngineConfig(collect_states=True), mapper=mapper)
    return cb.states


def stationary_quantiles(model: ModelSpec, regen: RegenScheme, probs: Sequence[float], n_cycles: int,
                         stream, mapper=None) -> np.ndarray:
    states = stationary_sample(model, regen, n_cycles, stream, mapper)
    return np.quantile(states, probs)
