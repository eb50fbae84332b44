"""The recursion maps and their backward sequences.

Four kinds are supported:

* ``LetacE``     F(v) = A max(D, v) + B
* ``Ruin``       F(v) = (A v + B)^+, i.e. LetacE with D = -B/A
* ``Linear``     F(v) = A v + B
* ``Polynomial`` F(v) = A v + B_{k-1} v^{(k-1)/k} + ... + B_1 v^{1/k} + B_0

Products of A are always carried as sums of logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .drivers import DriverSpec, Draws, Marginal, make_marginal
from .errors import InvalidParams, NonFiniteState, TruncationNotConverged, UnsupportedKind

KINDS = ("LetacE", "Ruin", "Linear", "Polynomial")
LETAC_KINDS = ("LetacE", "Ruin", "Linear")

BACKWARD_TOL = 1e-12
BACKWARD_RUN = 20
BACKWARD_NMAX = 100_000


@dataclass(frozen=True, eq=False)
class ModelSpec:
    kind: str
    driver: DriverSpec
    poly_coeffs: tuple[Marginal, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParams(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "Polynomial":
            object.__setattr__(self, "poly_coeffs", tuple(make_marginal(c) for c in self.poly_coeffs))
            impl = self.driver.impl
            if getattr(impl, "B", None) is None or impl.B.lower < 0:
                raise InvalidParams("Polynomial needs a nonnegative B_0 marginal")
            if any(c.lower < 0 for c in self.poly_coeffs):
                raise InvalidParams("Polynomial coefficients must be nonnegative")

    @property
    def k(self) -> int:
        return len(self.poly_coeffs) + 1

    def sample(self, rng: np.random.Generator, n: int, alpha: float = 0.0) -> Draws:
        """Driving draws with the kind's conventions applied (Ruin sets
        D = -B/A, Polynomial attaches the middle coefficients)."""
        d = self.driver.impl.sample(rng, int(n), alpha)
        if self.kind == "Ruin":
            d.D = -d.B * np.exp(-d.logA)
        elif self.kind == "Polynomial" and self.poly_coeffs:
            d.extra = np.stack([c.sample(rng, int(n)) for c in self.poly_coeffs])
        return d

    def G(self, v: np.ndarray, d: Draws) -> np.ndarray:
        """Polynomial remainder G_Y(v) = sum_{j<k} B_j v^{j/k}."""
        out = d.B.copy()
        if d.extra is not None:
            k = self.k
            for j in range(1, k):
                out = out + d.extra[j - 1] * np.power(v, j / k)
        return out

    def apply(self, v: np.ndarray, d: Draws) -> np.ndarray:
        A = np.exp(d.logA)
        if self.kind == "LetacE":
            return A * np.maximum(d.D, v) + d.B
        if self.kind == "Ruin":
            return np.maximum(A * v + d.B, 0.0)
        if self.kind == "Linear":
            return A * v + d.B
        return A * v + self.G(v, d)

    # -- transition density of the absolutely continuous part

    def density_parts(self, v: np.ndarray, nq: int = 64):
        """Return (s, g, w) with F(v) = A*s + g_q with probability w_q, A
        independent of g. Only kinds/drivers where that holds are accepted."""
        impl = self.driver.impl
        if not impl.has_density:
            raise UnsupportedKind(f"driver {impl.name} has no A-density")
        if self.kind == "Ruin":
            raise UnsupportedKind("Ruin uses the atom at 0, not a density")
        if impl.dependence != "independent":
            raise UnsupportedKind("transition density needs B independent of A")
        v = np.asarray(v, dtype=float)
        nodes, w = impl.B.quadrature(nq)
        if self.kind == "LetacE":
            if not impl.D.is_constant:
                raise UnsupportedKind("transition density needs constant D")
            s = np.maximum(impl.D.value, v)
            g = np.broadcast_to(nodes, v.shape + nodes.shape)
        elif self.kind == "Linear":
            s = v
            g = np.broadcast_to(nodes, v.shape + nodes.shape)
        else:
            if any(not c.is_constant for c in self.poly_coeffs):
                raise UnsupportedKind("Polynomial density needs constant middle coefficients")
            k = self.k
            mid = sum(c.value * np.power(v, (j + 1) / k) for j, c in enumerate(self.poly_coeffs))
            s = v
            g = nodes + np.asarray(mid)[..., None]
        return s, g, w

    def transition_density(self, v, x, nq: int = 64) -> np.ndarray:
        """h_v(x), density of the absolutely continuous part of F_Y(v).
        Broadcasts v against x."""
        v, x = np.broadcast_arrays(np.asarray(v, dtype=float), np.asarray(x, dtype=float))
        s, g, w = self.density_parts(v, nq)
        s = np.asarray(s)[..., None]
        a = (x[..., None] - g) / s
        pos = a > 0
        f = np.zeros_like(a)
        f[pos] = self.driver.impl.a_density(a[pos])
        return (f * w).sum(axis=-1) / s[..., 0]

    def state_lower(self) -> float:
        """A lower bound for the state after one step."""
        impl = self.driver.impl
        if self.kind == "Ruin":
            return 0.0
        b = impl.B.lower if getattr(impl, "B", None) is not None else -math.inf
        if self.kind in ("Linear", "Polynomial"):
            return b
        return b if impl.D.is_constant and impl.D.value >= 0 else -math.inf

    def to_config(self) -> dict:
        out = {"kind": self.kind, "driver": self.driver.to_config()}
        if self.poly_coeffs:
            out["poly_coeffs"] = [c.to_config() for c in self.poly_coeffs]
        return out


def make_model(kind: str, driver: DriverSpec, poly_coeffs: Sequence = ()) -> ModelSpec:
    return ModelSpec(kind, driver, tuple(poly_coeffs))


# ---------------------------------------------------------------------------
# scalar stepping


@dataclass(frozen=True)
class PathState:
    n: int
    V: float
    S: float
    draws: tuple = ()

    @property
    def logProd(self) -> float:
        return self.S


def initial_state(v0: float, retain: bool = False) -> PathState:
    return PathState(0, float(v0), 0.0, () if not retain else ())


def step(model: ModelSpec, state: PathState, draw, retain: bool = True) -> PathState:
    """Advance one step. ``draw`` is ``(logA, B, D)`` or
    ``(logA, B, D, extra)`` for Polynomial."""
    logA, B, D = float(draw[0]), float(draw[1]), float(draw[2])
    extra = None if len(draw) < 4 or draw[3] is None else np.atleast_1d(np.asarray(draw[3], dtype=float))
    if model.kind == "Ruin":
        D = -B * math.exp(-logA)
    if not math.isfinite(state.V):
        raise NonFiniteState(f"state {state.V} at n={state.n}")
    d = Draws(np.array([logA]), np.array([B]), np.array([D]), None,
              None if extra is None else extra[:, None])
    v = float(model.apply(np.array([state.V]), d)[0])
    if not math.isfinite(v):
        raise NonFiniteState(f"non-finite state after step {state.n + 1}")
    kept = state.draws + ((logA, B, D) if extra is None else (logA, B, D, tuple(extra)),) if retain else state.draws
    return PathState(state.n + 1, v, state.S + logA, kept)


def iterate(model: ModelSpec, v0: np.ndarray, draws: Draws) -> np.ndarray:
    """Forward states for a batch of paths. ``draws`` arrays have shape
    (n_paths, n_steps); returns (n_paths, n_steps + 1)."""
    lead = np.broadcast_shapes(np.shape(v0), np.shape(draws.logA)[:-1])
    v = np.broadcast_to(np.asarray(v0, dtype=float), lead).copy()
    n = draws.logA.shape[-1]
    out = np.empty(v.shape + (n + 1,))
    out[..., 0] = v
    for i in range(n):
        d = Draws(draws.logA[..., i], draws.B[..., i], draws.D[..., i], None,
                  None if draws.extra is None else draws.extra[..., i])
        v = model.apply(v, d)
        out[..., i + 1] = v
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("non-finite state in forward iteration")
    return out


def closed_form_forward(model: ModelSpec, v: float, draws: Draws) -> float:
    """V_n from the explicit max-of-sums expansion (B_0 = v)."""
    if model.kind not in LETAC_KINDS:
        raise UnsupportedKind("closed form exists for LetacE kinds only")
    logA = np.asarray(draws.logA, dtype=float)
    B = np.asarray(draws.B, dtype=float)
    D = np.asarray(draws.D, dtype=float)
    if model.kind == "Ruin":
        D = -B * np.exp(-logA)
    n = len(logA)
    # log of prod_{j=i+1}^n A_j for i = 0..n
    tail = np.concatenate([np.cumsum(logA[::-1])[::-1], [0.0]])
    Bfull = np.concatenate([[v], B])
    terms = Bfull * np.exp(tail)  # B_i prod_{j>i} A_j, i=0..n
    # suffix sums over i >= k
    cands = [math.fsum(terms)]
    if model.kind != "Linear":
        for k in range(1, n + 1):
            cands.append(math.fsum(terms[k:]) + D[k - 1] * math.exp(tail[k - 1]))
    out = max(cands)
    if not math.isfinite(out):
        raise NonFiniteState("closed form overflowed")
    return out


def ztilde(state: PathState) -> float:
    """V_n / (A_0 ... A_n), computed in log space."""
    V = state.V
    if V == 0:
        return 0.0
    return math.copysign(math.exp(math.log(abs(V)) - state.S), V)


# ---------------------------------------------------------------------------
# backward sequences


@dataclass
class BackwardSeqs:
    Zp: np.ndarray
    Zc: np.ndarray
    converged: bool
    n_converged: int | None = None

    @property
    def diff(self) -> np.ndarray:
        return self.Zp - self.Zc


def _cumsum_compensated(x: np.ndarray) -> np.ndarray:
    """Neumaier running sum along the last axis."""
    out = np.empty_like(x)
    s = np.zeros(x.shape[:-1])
    c = np.zeros(x.shape[:-1])
    for i in range(x.shape[-1]):
        xi = x[..., i]
        t = s + xi
        big = np.abs(s) >= np.abs(xi)
        c = c + np.where(big, (s - t) + xi, (xi - t) + s)
        s = t
        out[..., i] = s + c
    return out


def backward_seqs(model: ModelSpec, v0, draws: Draws, tol: float = BACKWARD_TOL,
                  run: int = BACKWARD_RUN) -> BackwardSeqs:
    """Perpetuity and conjugate partial sums for B_0 = v0, A_0 = 1.

    ``draws`` holds Y_1..Y_n along the last axis; leading axes batch paths.
    Index n of the outputs is the partial sum through term n.
    """
    if model.kind == "Polynomial":
        raise UnsupportedKind("use poly_residual_series for the Polynomial kind")
    logA = np.asarray(draws.logA, dtype=float)
    B = np.asarray(draws.B, dtype=float)
    D = np.asarray(draws.D, dtype=float)
    if model.kind == "Ruin":
        D = -B * np.exp(-logA)
    v0 = np.asarray(v0, dtype=float)
    lead = np.broadcast_shapes(v0.shape, logA.shape[:-1])
    n = logA.shape[-1]
    S = np.zeros(lead + (n + 1,))
    S[..., 1:] = np.cumsum(np.broadcast_to(logA, lead + (n,)), axis=-1)
    with np.errstate(over="raise", invalid="raise"):
        try:
            disc = np.exp(-S)
        except FloatingPointError as exc:
            raise NonFiniteState("discount factors overflowed") from exc
    terms = np.empty(lead + (n + 1,))
    terms[..., 0] = v0
    terms[..., 1:] = B * disc[..., 1:]
    Zp = _cumsum_compensated(terms)
    zc = np.minimum(Zp, 0.0)
    if model.kind != "Linear" and n > 0:
        m = Zp[..., :-1] - D * disc[..., :-1]  # k = 1..n
        zc[..., 1:] = np.minimum(zc[..., 1:], np.minimum.accumulate(m, axis=-1))
    if model.kind == "Ruin":
        # min(0, Zp_n, min_{1<=k<=n} Zp_k); Zp_0 = v0 enters only at n = 0
        run_min = Zp.copy()
        if n > 0:
            run_min[..., 1:] = np.minimum.accumulate(Zp[..., 1:], axis=-1)
        alt = np.minimum(0.0, run_min)
        scale = np.maximum(1.0, np.abs(alt))
        if np.any(np.abs(alt - zc) > 1e-9 * scale):
            raise AssertionError("ruin conjugate sequence disagrees with its specialisation")
    Dc = np.zeros_like(D) if model.kind == "Linear" else np.where(np.isfinite(D), D, 0.0)
    inc = (np.abs(B) + np.exp(logA) * np.abs(Dc)) * disc[..., 1:]
    small = np.all(inc.reshape(-1, n) < tol, axis=0) if n else np.zeros(0, dtype=bool)
    n_conv = None
    streak = 0
    for i, ok in enumerate(small):
        streak = streak + 1 if ok else 0
        if streak >= run:
            n_conv = i + 1
            break
    return BackwardSeqs(Zp, zc, n_conv is not None, n_conv)


def identity_violation(model: ModelSpec, v0, draws: Draws) -> tuple[float, int]:
    """Largest relative gap |(Zp_n - Zc_n) - Ztilde_n| / max(1, |Ztilde_n|)
    over all n with Ztilde_n > 0, and the number of checked indices."""
    states = iterate(model, np.asarray(v0, dtype=float), draws)
    S = np.zeros(states.shape)
    S[..., 1:] = np.cumsum(draws.logA, axis=-1)
    zt = np.sign(states) * np.exp(np.log(np.abs(np.where(states == 0, 1.0, states))) - S)
    zt = np.where(states == 0, 0.0, zt)
    bs = backward_seqs(model, v0, draws)
    mask = zt > 0
    if not mask.any():
        return 0.0, 0
    gap = np.abs(bs.diff - zt) / np.maximum(1.0, np.abs(zt))
    return float(gap[mask].max()), int(mask.sum())


def poly_residual_series(model: ModelSpec, cycle, tol: float = 1e-8, rate: float | None = None) -> tuple[float, float]:
    """V_0 + sum_n G_{Y_n}(V_{n-1}) / (A_1...A_n) on a retained cycle.

    Returns (value, tail_bound). The tail bound extrapolates the last term
    geometrically; if it exceeds ``tol`` relative to the value on a cycle
    that did not regenerate, TruncationNotConverged is raised.
    """
    if model.kind not in ("Polynomial", "Linear"):
        raise UnsupportedKind("series defined for Polynomial (and Linear as k=1)")
    V = np.asarray(cycle.states, dtype=float)
    n = len(cycle.logA)
    if n == 0:
        return float(V[0]), 0.0
    d = Draws(np.asarray(cycle.logA), np.asarray(cycle.B), np.asarray(cycle.D), None,
              None if cycle.extra is None else np.asarray(cycle.extra))
    prev = V[:n]
    G = model.G(prev, d) if model.kind == "Polynomial" else d.B
    S = np.cumsum(d.logA)
    terms = G * np.exp(-S)
    value = math.fsum(np.concatenate([[V[0]], terms]))
    if rate is None:
        k = model.k if model.kind == "Polynomial" else 1
        m = max(1, n // 4)
        slope = (S[-1] - S[-m - 1]) / m if n > m else S[-1] / n
        rate = math.exp(-max(slope, 1e-12) / k)
    tail = abs(terms[-1]) * rate / (1 - rate) if rate < 1 else math.inf
    if getattr(cycle, "tau_inf", False) and tail > tol * max(1.0, abs(value)):
        raise TruncationNotConverged(f"series tail {tail:.3g} above tolerance after {n} terms")
    return value, tail


@dataclass
class PolyHypotheses:
    """Moment condition on the coefficients and the drift condition
    E[log(A + sum_{j>=1} B_j / (2 B_0'))] < 0."""

    moments_finite: bool
    drift: float
    drift_se: float
    n: int

    @property
    def drift_ok(self) -> bool:
        return self.drift + 3 * self.drift_se < 0

    def to_dict(self) -> dict:
        return {"moments_finite": self.moments_finite, "drift": self.drift, "drift_se": self.drift_se,
                "drift_ok": self.drift_ok, "n": self.n}


def poly_hypotheses(model: ModelSpec, n: int = 1_000_000, rng: np.random.Generator | None = None) -> PolyHypotheses:
    """Check the Polynomial hypotheses. Every supported marginal
    (constant, normal, exponential, lognormal) has all moments, so the
    moment condition is structural; the drift is estimated by Monte Carlo
    with an independent copy of B_0 in the denominator."""
    if model.kind != "Polynomial":
        raise UnsupportedKind("hypotheses apply to Polynomial models")
    rng = rng or np.random.default_rng(0)
    d = model.sample(rng, n)
    b0 = model.driver.impl.B.sample(rng, n)
    mid = d.extra.sum(axis=0) if d.extra is not None else np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mid == 0, 0.0, mid / (2.0 * b0))
        x = np.log(np.exp(d.logA) + ratio)
    if not np.all(np.isfinite(x)):
        return PolyHypotheses(True, math.inf, 0.0, n)
    return PolyHypotheses(True, float(x.mean()), float(x.std(ddof=1) / math.sqrt(n)), n)
