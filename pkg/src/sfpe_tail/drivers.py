"""Driving laws for the recursion.

A driver is the joint law of ``(log A, B, D)``. Every family here can
sample under the base law and under the law tilted by ``A**alpha`` in the
first coordinate, and reports the moment function ``lam(alpha) = E[A**alpha]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, NamedTuple

import numpy as np
from scipy import optimize, special, stats

from .errors import (
    DomainBoundary,
    DriftNotNegative,
    EmptyInput,
    InvalidParams,
    NoRoot,
    OutOfDomain,
    RejectionInefficiency,
)

log = logging.getLogger(__name__)

EULER_GAMMA = 0.57721566490153286
XI_CAP = 1.0e3
REJECTION_FLOOR = 1.0e-3


@dataclass
class Draws:
    """A batch of driving triples. ``ac`` marks draws from an absolutely
    continuous A-component (all True unless the family has atoms)."""

    logA: np.ndarray
    B: np.ndarray
    D: np.ndarray
    ac: np.ndarray | None = None
    extra: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.logA)

    @property
    def A(self) -> np.ndarray:
        return np.exp(self.logA)

    def take(self, idx) -> "Draws":
        return Draws(
            self.logA[idx],
            self.B[idx],
            self.D[idx],
            None if self.ac is None else self.ac[idx],
            None if self.extra is None else self.extra[:, idx],
        )


# ---------------------------------------------------------------------------
# one-dimensional marginals for B and D


@dataclass(frozen=True)
class Marginal:
    dist: str
    params: tuple[float, ...] = ()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.dist == "constant":
            return np.full(n, p[0])
        if self.dist == "normal":
            return rng.normal(p[0], p[1], n)
        if self.dist == "exponential":
            return p[1] + rng.exponential(p[0], n)
        if self.dist == "lognormal":
            return np.exp(rng.normal(p[0], p[1], n))
        raise InvalidParams(f"unknown marginal {self.dist!r}")

    @property
    def is_constant(self) -> bool:
        return self.dist == "constant"

    @property
    def value(self) -> float:
        return float(self.params[0])

    @property
    def lower(self) -> float:
        p = self.params
        if self.dist == "constant":
            return p[0]
        if self.dist == "exponential":
            return p[1]
        if self.dist == "lognormal":
            return 0.0
        return -math.inf

    def _frozen(self):
        p = self.params
        if self.dist == "normal":
            return stats.norm(p[0], p[1])
        if self.dist == "exponential":
            return stats.expon(loc=p[1], scale=p[0])
        if self.dist == "lognormal":
            return stats.lognorm(p[1], scale=math.exp(p[0]))
        raise InvalidParams(self.dist)

    def quadrature(self, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Equal-weight midpoint-quantile nodes."""
        if self.is_constant:
            return np.array([self.value]), np.array([1.0])
        q = (np.arange(n) + 0.5) / n
        return self._frozen().ppf(q), np.full(n, 1.0 / n)

    def to_config(self) -> Any:
        p = self.params
        if self.dist == "constant":
            return p[0]
        keys = {"normal": ("mean", "sd"), "exponential": ("scale", "shift"), "lognormal": ("mu", "sigma")}
        return {"dist": self.dist, **dict(zip(keys[self.dist], p))}


def make_marginal(spec: Any) -> Marginal:
    if isinstance(spec, Marginal):
        return spec
    if isinstance(spec, (int, float)):
        return Marginal("constant", (float(spec),))
    if not isinstance(spec, Mapping):
        raise InvalidParams(f"bad marginal spec {spec!r}")
    dist = spec.get("dist", "constant")
    if dist == "constant":
        return Marginal("constant", (float(spec.get("value", 0.0)),))
    if dist == "normal":
        sd = float(spec.get("sd", 1.0))
        if sd <= 0:
            raise InvalidParams("normal sd must be positive")
        return Marginal("normal", (float(spec.get("mean", 0.0)), sd))
    if dist == "exponential":
        scale = float(spec.get("scale", 1.0))
        if scale <= 0:
            raise InvalidParams("exponential scale must be positive")
        return Marginal("exponential", (scale, float(spec.get("shift", 0.0))))
    if dist == "lognormal":
        s = float(spec.get("sigma", 1.0))
        if s <= 0:
            raise InvalidParams("lognormal sigma must be positive")
        return Marginal("lognormal", (float(spec.get("mu", 0.0)), s))
    raise InvalidParams(f"unknown marginal {dist!r}")


# ---------------------------------------------------------------------------
# families


class Family:
    """Base class. Subclasses fill in the law of log A and of (B, D)."""

    name = ""
    analytic_tilt = True
    has_density = True
    dependence = "independent"

    def __init__(self, params: Mapping[str, Any]):
        self.params = dict(params)
        self.B = make_marginal(self.params.get("B", 0.0))
        self.D = make_marginal(self.params.get("D", 0.0))

    domain = (-math.inf, math.inf)

    def lam(self, alpha: float) -> float:
        raise NotImplementedError

    def lam_prime(self, alpha: float) -> float:
        raise NotImplementedError

    def mean_logA(self) -> float:
        return self.lam_prime(0.0)

    def var_logA(self) -> float | None:
        """Closed-form Var(log A) where available."""
        return None

    def sample_logA(self, rng, n, alpha):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int, alpha: float = 0.0) -> Draws:
        logA, ac = self.sample_logA(rng, n, alpha)
        B = self.B.sample(rng, n)
        D = self.D.sample(rng, n)
        return Draws(logA, B, D, ac)

    def a_density(self, a: np.ndarray) -> np.ndarray:
        """Sub-density of the absolutely continuous part of A (base law)."""
        raise InvalidParams(f"{self.name} has no A-density")

    def b_quadrature(self, n: int = 64):
        if self.dependence != "independent":
            raise InvalidParams(f"{self.name}: B depends on A")
        return self.B.quadrature(n)


class Lognormal(Family):
    name = "lognormal"

    def __init__(self, params):
        super().__init__(params)
        self.mu = float(self.params["mu"])
        self.sigma = float(self.params["sigma"])
        if not self.sigma > 0:
            raise InvalidParams("sigma must be positive")

    def lam(self, a):
        return math.exp(a * self.mu + 0.5 * a * a * self.sigma**2)

    def lam_prime(self, a):
        return self.lam(a) * (self.mu + a * self.sigma**2)

    def mean_logA(self):
        return self.mu

    def var_logA(self):
        return self.sigma**2

    def sample_logA(self, rng, n, alpha):
        return rng.normal(self.mu + alpha * self.sigma**2, self.sigma, n), None

    def a_density(self, a):
        return stats.lognorm.pdf(a, self.sigma, scale=math.exp(self.mu))


class Arch(Family):
    """A = c Z**2, B = a, D = 0. Tilting turns Z**2 ~ Gamma(1/2, 2) into
    Gamma(1/2 + alpha, 2)."""

    name = "arch"
    domain = (-0.5, math.inf)

    def __init__(self, params):
        p = dict(params)
        self.c = float(p["c"])
        self.a = float(p.get("a", 1.0))
        if not (self.c > 0 and self.a > 0):
            raise InvalidParams("arch needs c > 0 and a > 0")
        p["B"], p["D"] = self.a, 0.0
        super().__init__(p)

    def lam(self, al):
        if al <= -0.5:
            raise OutOfDomain(f"alpha={al} outside (-1/2, inf)")
        return math.exp(al * math.log(2 * self.c) + special.gammaln(al + 0.5) - special.gammaln(0.5))

    def lam_prime(self, al):
        return self.lam(al) * (math.log(2 * self.c) + special.digamma(al + 0.5))

    def mean_logA(self):
        return math.log(self.c) - EULER_GAMMA - math.log(2.0)

    def var_logA(self):
        return math.pi**2 / 2.0

    def sample_logA(self, rng, n, alpha):
        g = rng.gamma(0.5 + alpha, 2.0, n)
        g = np.maximum(g, np.finfo(float).tiny)
        return math.log(self.c) + np.log(g), None

    def a_density(self, a):
        return stats.chi2.pdf(np.asarray(a) / self.c, 1) / self.c


class Ruin(Family):
    """Insurance with investment: A = 1/R, B = L/R with log R Gaussian and
    L = (compound Poisson claims) - premium."""

    name = "ruin"
    dependence = "functional"

    def __init__(self, params):
        p = dict(params)
        self.m_R = float(p.get("m_R", 0.05))
        self.s_R = float(p.get("s_R", 0.2))
        self.rate = float(p.get("rate", 1.0))
        self.claim_mean = float(p.get("claim_mean", 1.0))
        self.premium = float(p.get("premium", 1.1))
        if not (self.s_R > 0 and self.rate >= 0 and self.claim_mean > 0):
            raise InvalidParams("ruin needs s_R > 0, rate >= 0, claim_mean > 0")
        super().__init__(p)

    def lam(self, a):
        return math.exp(-a * self.m_R + 0.5 * a * a * self.s_R**2)

    def lam_prime(self, a):
        return self.lam(a) * (-self.m_R + a * self.s_R**2)

    def mean_logA(self):
        return -self.m_R

    def var_logA(self):
        return self.s_R**2

    def sample_logA(self, rng, n, alpha):
        return rng.normal(-self.m_R + alpha * self.s_R**2, self.s_R, n), None

    def sample(self, rng, n, alpha=0.0):
        logA, _ = self.sample_logA(rng, n, alpha)
        k = rng.poisson(self.rate, n)
        claims = np.zeros(n)
        pos = k > 0
        claims[pos] = rng.gamma(k[pos].astype(float), self.claim_mean)
        L = claims - self.premium
        return Draws(logA, L * np.exp(logA), -L, None)

    def a_density(self, a):
        return stats.lognorm.pdf(a, self.s_R, scale=math.exp(-self.m_R))


class Mixture(Family):
    """Point masses for A plus a lognormal component."""

    name = "mixture"

    def __init__(self, params):
        super().__init__(params)
        self.atoms = np.asarray(self.params.get("atoms", []), dtype=float)
        self.weights = np.asarray(self.params.get("weights", []), dtype=float)
        self.p_c = float(self.params.get("p_continuous", 1.0 - self.weights.sum()))
        self.mu = float(self.params.get("mu", 0.0))
        self.sigma = float(self.params.get("sigma", 1.0))
        if len(self.atoms) != len(self.weights) or np.any(self.atoms <= 0) or np.any(self.weights < 0):
            raise InvalidParams("mixture atoms must be positive with nonnegative weights")
        if not (self.p_c > 0 and abs(self.p_c + self.weights.sum() - 1) < 1e-12 and self.sigma > 0):
            raise InvalidParams("mixture weights must sum to 1 with a positive continuous part")

    def _parts(self, a):
        atom = self.weights * self.atoms**a
        cont = self.p_c * math.exp(a * self.mu + 0.5 * a * a * self.sigma**2)
        return atom, cont

    def lam(self, a):
        atom, cont = self._parts(a)
        return float(atom.sum() + cont)

    def lam_prime(self, a):
        atom, cont = self._parts(a)
        return float((atom * np.log(self.atoms)).sum() + cont * (self.mu + a * self.sigma**2))

    def sample_logA(self, rng, n, alpha):
        atom, cont = self._parts(alpha)
        w = np.append(atom, cont)
        w = w / w.sum()
        comp = rng.choice(len(w), size=n, p=w)
        ac = comp == len(self.atoms)
        out = np.empty(n)
        out[~ac] = np.log(self.atoms)[comp[~ac]]
        out[ac] = rng.normal(self.mu + alpha * self.sigma**2, self.sigma, int(ac.sum()))
        return out, ac

    def a_density(self, a):
        return self.p_c * stats.lognorm.pdf(a, self.sigma, scale=math.exp(self.mu))


class Laplace(Family):
    """log A asymmetric Laplace: Exp(rate_up) above 0 and Exp(rate_down)
    below, with P(log A > 0) = rate_down / (rate_up + rate_down).
    Tilting by alpha gives rates (rate_up - alpha, rate_down + alpha)."""

    name = "laplace"

    def __init__(self, params):
        super().__init__(params)
        self.ru = float(self.params["rate_up"])
        self.rd = float(self.params["rate_down"])
        if not (self.ru > 0 and self.rd > 0):
            raise InvalidParams("laplace rates must be positive")
        self.domain = (-self.rd, self.ru)

    def _rates(self, a):
        if not (-self.rd < a < self.ru):
            raise OutOfDomain(f"alpha={a} outside ({-self.rd}, {self.ru})")
        return self.ru - a, self.rd + a

    def lam(self, a):
        ru, rd = self._rates(a)
        return self.ru * self.rd / (ru * rd)

    def lam_prime(self, a):
        ru, rd = self._rates(a)
        return self.lam(a) * (1.0 / ru - 1.0 / rd)

    def mean_logA(self):
        return 1.0 / self.ru - 1.0 / self.rd

    def var_logA(self):
        p = self.rd / (self.ru + self.rd)
        m2 = 2 * p / self.ru**2 + 2 * (1 - p) / self.rd**2
        return m2 - self.mean_logA() ** 2

    def sample_logA(self, rng, n, alpha):
        ru, rd = self._rates(alpha)
        up = rng.random(n) < rd / (ru + rd)
        e = rng.exponential(1.0, n)
        return np.where(up, e / ru, -e / rd), None

    def a_density(self, a):
        a = np.asarray(a, dtype=float)
        x = np.log(np.where(a > 0, a, 1.0))
        k = self.ru * self.rd / (self.ru + self.rd)
        f = np.where(x > 0, k * np.exp(-self.ru * x), k * np.exp(self.rd * x))
        return np.where(a > 0, f / np.where(a > 0, a, 1.0), 0.0)


class Constant(Family):
    name = "constant"
    has_density = False

    def __init__(self, params):
        super().__init__(params)
        self.a_val = float(self.params["a"])
        if not self.a_val > 0:
            raise InvalidParams("constant A must be positive")

    def lam(self, al):
        return self.a_val**al

    def lam_prime(self, al):
        return self.a_val**al * math.log(self.a_val)

    def mean_logA(self):
        return math.log(self.a_val)

    def var_logA(self):
        return 0.0

    def sample_logA(self, rng, n, alpha):
        return np.full(n, math.log(self.a_val)), np.zeros(n, dtype=bool)


class Table(Family):
    """Empirical triples. Tilting is by acceptance-rejection with the exact
    envelope max A**alpha over the table."""

    name = "table"
    analytic_tilt = False
    has_density = False
    dependence = "functional"

    def __init__(self, params):
        self.params = dict(params)
        if "rows" in self.params:
            rows = np.asarray(self.params["rows"], dtype=float)
        else:
            rows = load_table(self.params["path"])
        if rows.ndim != 2 or rows.shape[1] != 3 or len(rows) == 0:
            raise EmptyInput("table needs at least one (logA, B, D) row")
        if not np.all(np.isfinite(rows)):
            raise InvalidParams("table contains non-finite values")
        self.rows = rows
        self.floor = float(self.params.get("rejection_floor", REJECTION_FLOOR))
        self.B = self.D = None
        self.acceptance: dict[float, float] = {}

    def lam(self, a):
        return float(np.mean(np.exp(a * self.rows[:, 0])))

    def lam_prime(self, a):
        x = self.rows[:, 0]
        return float(np.mean(x * np.exp(a * x)))

    def sample(self, rng, n, alpha=0.0):
        m = len(self.rows)
        if alpha == 0.0:
            idx = rng.integers(0, m, n)
        else:
            w = alpha * self.rows[:, 0]
            rate = float(np.mean(np.exp(w - w.max())))
            self.acceptance[alpha] = rate
            if rate < self.floor:
                raise RejectionInefficiency(f"acceptance {rate:.2e} below floor {self.floor:g}")
            idx = np.empty(0, dtype=np.int64)
            while len(idx) < n:
                k = int((n - len(idx)) / rate * 1.1) + 16
                cand = rng.integers(0, m, k)
                keep = rng.random(k) < np.exp(w[cand] - w.max())
                idx = np.concatenate([idx, cand[keep]])
            idx = idx[:n]
        r = self.rows[idx]
        return Draws(r[:, 0].copy(), r[:, 1].copy(), r[:, 2].copy(), np.zeros(n, dtype=bool))


FAMILIES: dict[str, type[Family]] = {
    f.name: f for f in (Lognormal, Arch, Ruin, Mixture, Laplace, Constant, Table)
}


def load_table(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = [h.strip() for h in next(reader, [])]
        if header != ["logA", "B", "D"]:
            raise InvalidParams(f"table header must be logA,B,D, got {header}")
        rows = [[float(v) for v in r] for r in reader if r]
    return np.asarray(rows, dtype=float).reshape(-1, 3)


# ---------------------------------------------------------------------------
# public types


@dataclass(frozen=True, eq=False)
class DriverSpec:
    family: str
    params: dict = field(default_factory=dict)
    dependence: str = "independent"
    impl: Family = field(default=None, repr=False, compare=False)

    def sample(self, rng: np.random.Generator, n: int) -> Draws:
        return self.impl.sample(rng, int(n), 0.0)

    @property
    def analytic_tilt(self) -> bool:
        return self.impl.analytic_tilt

    @property
    def domain(self) -> tuple[float, float]:
        return self.impl.domain

    def mean_logA(self) -> float:
        return self.impl.mean_logA()

    def logA_moments(self, n: int = 1_000_000, seed: int = 17) -> tuple[float, float]:
        """(E log A, Var log A), closed form where the family has one."""
        m, v = self.impl.mean_logA(), self.impl.var_logA()
        if v is None:
            x = self.sample(np.random.default_rng(seed), n).logA
            v = float(x.var())
        return float(m), float(v)

    def to_config(self) -> dict:
        out = {"family": self.family}
        for k, v in self.params.items():
            out[k] = v.to_config() if isinstance(v, Marginal) else v
        return out


def make_driver(family: str, params: Mapping[str, Any] | None = None, dependence: str | None = None) -> DriverSpec:
    """Build and validate a driver. Fails if E[log A] >= 0."""
    params = dict(params or {})
    if family not in FAMILIES:
        raise InvalidParams(f"unknown driver family {family!r}; choose from {sorted(FAMILIES)}")
    try:
        impl = FAMILIES[family](params)
    except (KeyError, TypeError) as exc:
        raise InvalidParams(f"{family}: missing or bad parameter ({exc})") from exc
    dep = dependence or impl.dependence
    if dep not in ("independent", "functional"):
        raise InvalidParams(f"dependence must be independent or functional, got {dep!r}")
    drift = impl.mean_logA()
    if not drift < 0:
        raise DriftNotNegative(f"E[log A] = {drift:.6g} is not negative")
    return DriverSpec(family, params, dep, impl)


@dataclass(frozen=True)
class Cumulant:
    """lam(alpha) = E[A**alpha]; Lambda = log lam."""

    lam_fn: Callable[[float], float]
    lam_prime_fn: Callable[[float], float]
    domain: tuple[float, float]
    analytic: bool = True
    se_fn: Callable[[float], float] | None = None

    def lam(self, alpha: float) -> float:
        self._check(alpha)
        return self.lam_fn(alpha)

    def Lambda(self, alpha: float) -> float:
        return math.log(self.lam(alpha))

    def lambda_prime(self, alpha: float) -> float:
        self._check(alpha)
        return self.lam_prime_fn(alpha)

    def Lambda_se(self, alpha: float) -> float:
        if self.se_fn is None:
            return 0.0
        return self.se_fn(alpha) / self.lam(alpha)

    def _check(self, alpha):
        lo, hi = self.domain
        if not lo < alpha < hi:
            raise OutOfDomain(f"alpha={alpha} outside ({lo}, {hi})")


class MonteCarloCumulant:
    """Cumulant from a fixed sample of log A with batch-means errors."""

    def __init__(self, logA: np.ndarray, n_batches: int = 50):
        self.logA = np.asarray(logA, dtype=float)
        self.n_batches = n_batches
        self.domain = (-math.inf, math.inf)
        self.analytic = False

    def _mean_se(self, vals):
        from .stats import batch_means

        return batch_means(vals, self.n_batches)

    def lam(self, a):
        vals = np.exp(a * self.logA)
        if vals.max() > 0.5 * vals.sum() and len(vals) > 100:
            raise OutOfDomain(f"alpha={a}: one draw carries over half the mass")
        return float(vals.mean())

    def Lambda(self, a):
        return math.log(self.lam(a))

    def lambda_prime(self, a):
        return float(np.mean(self.logA * np.exp(a * self.logA)))

    def lam_se(self, a):
        return self._mean_se(np.exp(a * self.logA))[1]

    def Lambda_se(self, a):
        return self.lam_se(a) / self.lam(a)


def cumulant(driver: DriverSpec, method: str = "auto", n: int = 1_000_000, rng: np.random.Generator | None = None):
    """Moment functions of A. Closed forms where the family has them,
    otherwise a Monte Carlo estimate."""
    impl = driver.impl
    if method == "auto" or method == "analytic":
        return Cumulant(impl.lam, impl.lam_prime, impl.domain, analytic=True)
    rng = rng or np.random.default_rng(0)
    return MonteCarloCumulant(driver.sample(rng, n).logA)


class XiSolution(NamedTuple):
    xi: float
    lambda_prime: float
    Lambda_at_root: float = 0.0
    stderr: float = 0.0


def _auto_bracket(f, domain, lo=None, hi=None):
    dlo, dhi = domain
    a = lo if lo is not None else 1e-6
    if f(a) >= 0:
        a = 1e-9
        if f(a) >= 0:
            raise NoRoot("Lambda is not negative just above 0")
    b = hi if hi is not None else 1.0
    cap = min(XI_CAP, dhi)
    while True:
        if b >= dhi:
            b = dhi - 1e-12 * max(1.0, abs(dhi))
        try:
            fb = f(b)
        except OutOfDomain:
            fb = math.inf
        if fb > 0:
            return a, b
        if b >= cap * (1 - 1e-9):
            if math.isfinite(dhi) and b >= dhi * (1 - 1e-9):
                raise DomainBoundary(f"Lambda still negative at the domain edge {dhi}")
            raise NoRoot(f"Lambda < 0 on (0, {cap:g}]")
        a = b
        b = min(2 * b, cap)


def solve_xi(cum, bracket: tuple[float, float] | None = None, xtol: float = 1e-14) -> XiSolution:
    """Positive root of Lambda. Returns (xi, lambda'(xi))."""
    if isinstance(cum, DriverSpec):
        cum = cumulant(cum)
    if isinstance(cum, MonteCarloCumulant):
        return _solve_xi_mc(cum, bracket)
    f = cum.Lambda
    lo, hi = bracket if bracket is not None else (None, None)
    if bracket is not None and not (f(lo) < 0 < f(hi)):
        a, b = _auto_bracket(f, cum.domain, lo if f(lo) < 0 else None, hi)
    else:
        a, b = _auto_bracket(f, cum.domain, lo, hi)
    xi = optimize.brentq(f, a, b, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)
    dhi = cum.domain[1]
    if math.isfinite(dhi) and xi > dhi * (1 - 1e-6):
        raise DomainBoundary(f"root {xi} sits at the domain edge {dhi}")
    return XiSolution(xi, cum.lambda_prime(xi), f(xi), 0.0)


def _solve_xi_mc(cum: MonteCarloCumulant, bracket, rng=None, max_doublings: int = 5) -> XiSolution:
    """Sample-average root with an independent-sample check. The sample is
    doubled until the check sample puts |Lambda(xi)| within 2 stderr."""
    rng = rng or np.random.default_rng(1)
    sample = cum.logA
    for _ in range(max_doublings + 1):
        c = MonteCarloCumulant(sample)
        a, b = bracket if bracket is not None else _auto_bracket(c.Lambda, c.domain)
        xi = optimize.brentq(c.Lambda, a, b, xtol=1e-12)
        idx = rng.integers(0, len(cum.logA), len(sample))
        check = MonteCarloCumulant(sample[idx] if len(sample) > len(cum.logA) else cum.logA[idx])
        val, se = check.Lambda(xi), check.Lambda_se(xi)
        if abs(val) <= 2 * se:
            return XiSolution(xi, c.lambda_prime(xi), val, se)
        sample = np.concatenate([sample, sample[rng.integers(0, len(sample), len(sample))]])
    return XiSolution(xi, c.lambda_prime(xi), val, se)


@dataclass(frozen=True, eq=False)
class TiltedDriver:
    """The law of (log A, B, D) reweighted by A**alpha / lam(alpha)."""

    base: DriverSpec
    alpha: float
    normalizer: float
    identity_check: dict = field(default_factory=dict, compare=False)

    def sample(self, rng: np.random.Generator, n: int) -> Draws:
        return self.base.impl.sample(rng, int(n), self.alpha)

    @property
    def impl(self) -> Family:
        return self.base.impl


def tilt_identity_stats(driver: DriverSpec, alpha: float, n: int, rng: np.random.Generator) -> dict:
    """Compare E_tilted[f] with E[f A**alpha]/lam(alpha) for three test
    functions; returns z-scores."""
    lam = driver.impl.lam(alpha)
    x0 = driver.sample(rng, n).logA
    x1 = driver.impl.sample(rng, n, alpha).logA
    w = np.exp(alpha * x0) / lam
    out = {}
    for name, f in (("x", lambda x: x), ("x2", lambda x: x * x), ("pos", lambda x: (x > 0).astype(float))):
        a, b = f(x0) * w, f(x1)
        se = math.sqrt(a.var() / n + b.var() / n)
        out[name] = 0.0 if se == 0 else (a.mean() - b.mean()) / se
    return out


def tilt(driver: DriverSpec, alpha: float, check: bool = True, n_check: int = 20_000) -> TiltedDriver:
    lo, hi = driver.domain
    if not lo < alpha < hi:
        raise OutOfDomain(f"alpha={alpha} outside ({lo}, {hi})")
    lam = driver.impl.lam(alpha)
    if not math.isfinite(lam):
        raise OutOfDomain(f"lam({alpha}) is not finite")
    report: dict = {}
    if check and alpha != 0.0:
        report = tilt_identity_stats(driver, alpha, n_check, np.random.default_rng(12345))
        bad = {k: v for k, v in report.items() if abs(v) > 4}
        if bad:
            log.warning("tilt identity check off by more than 4 se: %s", bad)
    if isinstance(driver.impl, Table) and alpha != 0.0:
        # probe the acceptance rate now so inefficiency surfaces at construction
        driver.impl.sample(np.random.default_rng(0), 1, alpha)
        report["acceptance"] = driver.impl.acceptance[alpha]
    return TiltedDriver(driver, float(alpha), lam, report)
