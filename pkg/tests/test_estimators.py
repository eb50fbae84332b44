import math

import numpy as np
import pytest

from sfpe_tail import make_driver, make_model, make_regen
from sfpe_tail.drivers import cumulant, solve_xi
from sfpe_tail.errors import InvalidParams, UnsupportedKind
from sfpe_tail.estimators import (
    cstar_constant_driver,
    decompose_C,
    estimate_C_components,
    estimate_Cstar,
    estimate_theta,
    ladder_stats,
    ladder_walks,
    lundberg_bound,
    sup_closed_form,
    tail_curve,
    theta_constant_driver,
)
from sfpe_tail.regeneration import EngineConfig, cycle_stats, simulate_cycles
from sfpe_tail.rng import Stream


@pytest.fixture(scope="module")
def ruin_xi(ruin_model):
    return solve_xi(cumulant(ruin_model.driver))


@pytest.fixture(scope="module")
def ruin_components(ruin_model, ruin_regen, ruin_xi):
    return estimate_C_components(ruin_model, ruin_regen, 20_000, Stream(1), n_tau_cycles=50_000)


@pytest.fixture(scope="module")
def ruin_ladder(ruin_model, ruin_xi):
    return ladder_stats(ruin_model.driver, ruin_xi.xi, 100_000, Stream(2))


def test_sup_closed_form_examples():
    assert sup_closed_form(1.0, 1.0, 2.0) == 1.0
    # interior maximum at z* = 1 - 0.25 = 0.75
    assert sup_closed_form(2.0, 0.5, 1.0) == pytest.approx(2 * math.exp(-0.75), rel=1e-14)


@pytest.mark.parametrize("C1,C2,xi", [(2.0, 0.5, 1.0), (5.0, 3.0, 0.7), (0.3, 2.0, 1.5), (10.0, 0.1, 2.5)])
def test_sup_closed_form_vs_grid(C1, C2, xi):
    z = np.linspace(0, 50, 500_001)
    assert sup_closed_form(C1, C2, xi) == pytest.approx(np.max(np.exp(-xi * z) * (z * C1 + C2)), rel=1e-8)


def test_sup_closed_form_rejects_negative():
    with pytest.raises(InvalidParams):
        sup_closed_form(-1.0, 1.0, 1.0)


def test_theta_deterministic_exact():
    d, xi = 0.7, 1.9
    assert theta_constant_driver(-d, xi) == pytest.approx(1 - math.exp(-xi * d), abs=1e-12)
    lp = 0.4
    assert cstar_constant_driver(-d, xi, lp) == pytest.approx((1 - math.exp(-xi * d)) / (xi * lp), abs=1e-12)


def test_theta_constant_driver_path():
    drv = make_driver("constant", {"a": math.exp(-0.5), "B": 1.0})
    th = estimate_theta(drv, 10, xi=2.0)
    assert th.value == pytest.approx(1 - math.exp(-1.0), abs=1e-12)
    assert th.stderr == 0.0


def test_ladder_bounds(ruin_ladder):
    assert 0 < ruin_ladder.one_minus_E.value < 1
    assert ruin_ladder.tau_star.value >= 1
    th = ruin_ladder.theta()
    lo, hi = th.ci95
    assert 0 < lo and hi <= 1


def test_cstar_vs_first_passage():
    # exponential right tail: P(max S > x) e^{xi x} -> C*; estimated with the
    # tilted walk, which crosses x surely, as E_xi[exp(-xi (S_T - x))]
    drv = make_driver("laplace", {"rate_up": 3.0, "rate_down": 1.0, "B": 1.0})
    sol = solve_xi(cumulant(drv))
    cs = estimate_Cstar(drv, 200_000, Stream(3), xi=sol.xi, lambda_prime=sol.lambda_prime)
    rng = np.random.default_rng(4)
    x, n = 30.0, 50_000
    S = np.zeros(n)
    live = np.ones(n, bool)
    over = np.zeros(n)
    while live.any():
        S[live] += drv.impl.sample(rng, int(live.sum()), sol.xi).logA
        crossed = live & (S > x)
        over[crossed] = S[crossed] - x
        live &= ~crossed
    direct = np.exp(-sol.xi * over)
    se = direct.std() / math.sqrt(n)
    assert abs(direct.mean() - cs.value) <= 3 * math.hypot(se, cs.stderr)


def test_decomposition_exact(ruin_components, ruin_ladder):
    out = decompose_C(ruin_components, ruin_ladder)
    assert out["rel_gap"] < 1e-12


def test_C_positive(ruin_components):
    c = ruin_components.C
    assert c.value > 0 and c.ci95[0] > 0


def test_ruin_conjugate_zero_on_escape(ruin_model, ruin_regen, ruin_xi):
    b = simulate_cycles(ruin_model, ruin_regen, 5000, 5,
                        EngineConfig(measure="shifted", xi=ruin_xi.xi, track_backward=True))
    assert np.all(b.zc[b.tau_inf] == 0.0)


def test_reflected_walk_C_matches_Cstar():
    drv = make_driver("lognormal", {"mu": -0.5, "sigma": 1.0, "B": 0.0, "D": 1.0})
    m = make_model("LetacE", drv)
    r = make_regen(m, {"scheme": "atom"})
    c = estimate_C_components(m, r, 20_000, Stream(6), n_tau_cycles=50_000).C
    cs = estimate_Cstar(drv, 200_000, Stream(7))
    assert c.overlaps(cs)


def test_tail_curve_flattens(ruin_model, ruin_regen, ruin_components, ruin_xi):
    C = ruin_components.C.value
    rows = tail_curve(ruin_model, ruin_regen, [100.0, 300.0, 1000.0], "dual", Stream(8), xi=ruin_xi.xi,
                      n_cycles=20_000, n_tau_cycles=50_000, C_hat=C)
    vals = np.array([r["u_xi_p"] for r in rows])
    assert np.std(vals) < 0.15 * C


def test_tail_curve_median_and_crude_vs_dual(ruin_model, ruin_regen, ruin_xi):
    b = simulate_cycles(ruin_model, ruin_regen, 50_000, 9, EngineConfig(collect_states=True))
    med = float(np.median(b.states))
    crude = tail_curve(ruin_model, ruin_regen, [med, 5.0], "crude", Stream(10), xi=ruin_xi.xi, n_cycles=100_000)
    dual = tail_curve(ruin_model, ruin_regen, [5.0], "dual", Stream(11), xi=ruin_xi.xi, n_cycles=50_000,
                      n_tau_cycles=100_000)
    assert crude[0]["p_hat"] == pytest.approx(0.5, abs=0.05)
    assert abs(crude[1]["p_hat"] - dual[0]["p_hat"]) <= 3 * math.hypot(crude[1]["stderr"], dual[0]["stderr"])


def test_theta_finite_u_meta(ruin_model, ruin_regen, ruin_ladder):
    th = estimate_theta(ruin_model.driver, ladder=ruin_ladder, model=ruin_model, regen=ruin_regen,
                        u_levels=[20.0], n_cycles=50_000)
    assert "finite_u" in th.meta


def test_lundberg_small(ruin_model, ruin_regen, ruin_xi):
    res = lundberg_bound(ruin_model, ruin_regen, [1e3, 1e4, 1e5], Stream(12), xi=ruin_xi.xi, n_x=50_000,
                         n_w=9, n_w_cycles=300, n_zbar_cycles=5000, n_vbar=50_000)
    assert len(res.rows) == 3
    for row in res.rows:
        assert row.C1 > 0 and row.C2 >= 1 and row.Delta > 0
        assert row.bound > 0 and row.bound_conservative >= row.bound
    assert {"C1", "C2"} <= set(res.limits)


def test_lundberg_rejects_polynomial():
    drv = make_driver("lognormal", {"mu": -0.5, "sigma": 1.0, "B": {"dist": "exponential", "scale": 1.0, "shift": 1.0}})
    m = make_model("Polynomial", drv, [0.5])
    with pytest.raises(UnsupportedKind):
        lundberg_bound(m, make_regen(m, {"scheme": "smallset", "hi": 8.0}), [1e3], Stream(1), xi=1.0)


def test_ladder_workers_agree(ruin_model, ruin_xi):
    from concurrent.futures import ThreadPoolExecutor

    a = ladder_walks(ruin_model.driver, ruin_xi.xi, 10_000, Stream(13))
    with ThreadPoolExecutor(4) as ex:
        b = ladder_walks(ruin_model.driver, ruin_xi.xi, 10_000, Stream(13), mapper=ex.map)
    assert a.tau_star.value == b.tau_star.value and a.one_minus_E.value == b.one_minus_E.value
