import math

import numpy as np
import pytest
from scipy import stats

from sfpe_tail import make_driver, make_model, make_regen
from sfpe_tail.drivers import cumulant, solve_xi
from sfpe_tail.regeneration import EngineConfig, cycle_stats, simulate_cycles
from sfpe_tail.tilt_engine import (
    DualPolicy,
    WeightedSet,
    dual_branches,
    dual_mean_Nu,
    fixed_horizon_check,
    importance_tail_estimate,
    run_dual_cycle,
    run_shifted_cycle,
    simulate_dual,
)


@pytest.fixture(scope="module")
def xi(ruin_model):
    return solve_xi(cumulant(ruin_model.driver)).xi


def test_zero_tilt_matches_original(ruin_model, ruin_regen):
    a = simulate_cycles(ruin_model, ruin_regen, 10_000, 1, EngineConfig(measure="shifted", xi=0.0))
    b = simulate_cycles(ruin_model, ruin_regen, 10_000, 2, EngineConfig())
    assert stats.ks_2samp(a.tau, b.tau).pvalue > 0.01


def test_shifted_drift_lognormal():
    m = make_model("LetacE", make_driver("lognormal", {"mu": -0.05, "sigma": 0.2, "B": 1.0, "D": 0.0}))
    r = make_regen(m, {"scheme": "atom"})
    c = run_shifted_cycle(m, r, 2.5, stream=3, cap=5000, esc_S=1e9, esc_level=1e300)
    assert len(c.logA) > 1000
    assert c.logA.mean() == pytest.approx(0.05, abs=4 * 0.2 / math.sqrt(len(c.logA)))


def test_dual_immediate_hit(ruin_model, ruin_regen, xi):
    path, ws = run_dual_cycle(ruin_model, ruin_regen, DualPolicy(xi, -math.inf), stream=1)
    assert path.Tu == 0
    assert ws.weight == 1.0
    assert np.all(path.tags == 0)


def test_dual_tags_switch_at_hit(ruin_model, ruin_regen, xi):
    seen = 0
    for s in range(40):
        path, ws = run_dual_cycle(ruin_model, ruin_regen, DualPolicy(xi, 5.0), stream=s)
        assert ws.weight > 0
        if path.Tu is not None and path.Tu >= 0:
            seen += 1
            assert path.states[path.Tu] > 5.0
            assert np.all(path.tags[: path.Tu] == 1)
            assert np.all(path.tags[path.Tu:] == 0)
        else:
            assert np.all(path.tags == 1)
    assert seen > 0


def test_dual_matches_crude(ruin_model, ruin_regen, xi):
    u = 5.0
    crude = cycle_stats(simulate_cycles(ruin_model, ruin_regen, 200_000, 4, EngineConfig(u_levels=(u,))))
    batch = simulate_dual(ruin_model, ruin_regen, xi, u, 50_000, 5)
    e, _ = dual_mean_Nu(batch, xi)
    c = crude.E_Nu[0]
    assert abs(e.value - c.value) <= 3 * math.hypot(e.stderr, c.stderr)
    assert np.all(batch.VTu[batch.Tu[:, 0] >= 0, 0] > u)


def test_two_branches_sum(ruin_model, ruin_regen, xi):
    u = 5.0
    batch = simulate_dual(ruin_model, ruin_regen, xi, u, 50_000, 6)
    crude = cycle_stats(simulate_cycles(ruin_model, ruin_regen, 100_000, 7, EngineConfig(u_levels=(u,))))
    for g, ref in (("tau", crude.E_tau), ("Nu", crude.E_Nu[0])):
        br = dual_branches(batch, xi, g)
        tot = br["hit"][0] + br["regenerated"][0]
        assert tot == pytest.approx(br["total"][0])
        assert abs(tot - ref.value) <= 3 * math.hypot(br["total"][1], ref.stderr)


def test_importance_vs_crude(ruin_model, ruin_regen, xi):
    u = 8.0
    crude = cycle_stats(simulate_cycles(ruin_model, ruin_regen, 200_000, 8, EngineConfig(u_levels=(u,)))).p_hat[0]
    est = importance_tail_estimate(ruin_model, ruin_regen, xi, u, 40_000, 9, n_tau_cycles=100_000)
    assert est.value > 0
    assert abs(est.value - crude.value) <= 3 * math.hypot(est.stderr, crude.stderr)


def test_relative_error_grows_slowly(ruin_model, ruin_regen, xi):
    a = importance_tail_estimate(ruin_model, ruin_regen, xi, 10.0, 20_000, 10, n_tau_cycles=50_000)
    b = importance_tail_estimate(ruin_model, ruin_regen, xi, 100.0, 20_000, 10, n_tau_cycles=50_000)
    assert b.meta["rel_se"] / a.meta["rel_se"] < math.sqrt(10.0) ** xi


def test_weighted_set_no_underflow():
    ws = WeightedSet(np.ones(100), np.full(100, -2000.0))
    lm, rel = ws.log_mean()
    assert lm == pytest.approx(-2000.0)
    assert rel == pytest.approx(0.0)


@pytest.mark.parametrize("offset,passes", [(0.0, True), (0.1, False)])
def test_fixed_horizon(ruin_model, xi, offset, passes):
    out = fixed_horizon_check(ruin_model, xi, 100_000, 5, 1, tilt_offset=offset)
    assert out["passed"] is passes
