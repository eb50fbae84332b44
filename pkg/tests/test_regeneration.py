import math

import numpy as np
import pytest

from sfpe_tail import make_driver, make_model, make_regen
from sfpe_tail.errors import EmptyInput
from sfpe_tail.regeneration import (
    CyclePath,
    EngineConfig,
    compute_drift_params,
    cycle_stats,
    run_cycle,
    simulate_cycles,
    validate_minorization,
)
from sfpe_tail.sfpe_core import iterate
from sfpe_tail.stats import batch_means


def _path(states, u=5.0):
    n = len(states)
    z = np.zeros(n)
    return CyclePath(np.asarray(states, float), z, z, z, z, z, float(n), False, False, None, 0, u, "original", 0.0)


def test_ruin_atom_scheme(ruin_model):
    r = make_regen(ruin_model, {"scheme": "auto"})
    assert r.kind == "atom" and r.delta == 1.0 and r.level == 0.0
    x = r.sample_nu(np.random.default_rng(0), 10_000)
    assert np.all(x >= 0) and np.mean(x == 0) > 0


def test_hand_cycle_counts():
    c = _path([3.0, 6.0, 2.0, 0.0])
    assert c.tau == 4 and c.recount(5.0) == 1


def test_cycle_stats_arithmetic():
    cs = cycle_stats([_path([1, 6, 1, 1]), _path([1, 1, 1, 1, 1, 1])], u_levels=[5.0])
    assert cs.E_tau.value == 5.0
    assert cs.E_Nu[0].value == 0.5
    assert cs.p_hat[0].value == pytest.approx(0.1)


def test_cycle_stats_all_above():
    cs = cycle_stats([_path([7, 8, 9]), _path([6, 6])], u_levels=[5.0])
    assert cs.p_hat[0].value == pytest.approx(1.0)


def test_cycle_stats_empty():
    with pytest.raises(EmptyInput):
        cycle_stats([])


def test_shifted_cycles_escape(ruin_model, ruin_regen):
    from sfpe_tail.drivers import cumulant, solve_xi

    xi = solve_xi(cumulant(ruin_model.driver)).xi
    b = simulate_cycles(ruin_model, ruin_regen, 4000, 1, EngineConfig(measure="shifted", xi=xi))
    f1 = b.tau_inf.mean()
    f2 = simulate_cycles(ruin_model, ruin_regen, 4000, 2, EngineConfig(measure="shifted", xi=xi)).tau_inf.mean()
    assert f1 > 0.05
    se = math.sqrt(f1 * (1 - f1) / 4000 * 2)
    assert abs(f1 - f2) < 4 * se


@pytest.mark.parametrize("seed", range(5, 12))
def test_atom_cycles_end_at_origin(ruin_model, ruin_regen, seed):
    c = run_cycle(ruin_model, ruin_regen, stream=seed)
    assert c.states[-1] == 0.0
    assert np.all(c.states[1:-1] > 0)
    # the closing draw restarts the chain from law(B^+)
    d = type(ruin_model.sample(np.random.default_rng(0), 1))
    nxt = ruin_model.apply(c.states[-1:], d(c.logA[-1:], c.B[-1:], c.D[-1:]))
    assert nxt[0] == max(c.B[-1], 0.0)


def test_representation_formula(ruin_model, ruin_regen):
    # ergodic frequency of {V > u} from one long forward chain
    n = 400_000
    d = ruin_model.sample(np.random.default_rng(7), n)
    V = iterate(ruin_model, np.array(0.0), d)[1:]
    b = simulate_cycles(ruin_model, ruin_regen, 100_000, 3, EngineConfig(u_levels=tuple(np.quantile(V, [0.9, 0.99]))))
    cs = cycle_stats(b)
    for j, q in enumerate((0.9, 0.99)):
        u = b.u_levels[j]
        freq, se_f = batch_means((V > u).astype(float), 50)
        p = cs.p_hat[j]
        assert abs(p.value - freq) <= 3 * math.hypot(p.stderr, se_f)


def test_e_tau_reproducible(ruin_model, ruin_regen):
    a = cycle_stats(simulate_cycles(ruin_model, ruin_regen, 100_000, 11)).E_tau
    b = cycle_stats(simulate_cycles(ruin_model, ruin_regen, 100_000, 12)).E_tau
    assert abs(a.value - b.value) <= 3 * math.hypot(a.stderr, b.stderr)


def test_cycle_independence(ruin_model, ruin_regen):
    b = simulate_cycles(ruin_model, ruin_regen, 20_000, 4, EngineConfig(u_levels=(3.0,)))
    for x in (b.tau.astype(float), b.Nu[:, 0].astype(float)):
        r = np.corrcoef(x[:-1], x[1:])[0, 1]
        assert abs(r) < 4 / math.sqrt(len(x))


def test_drift_params_example():
    m = make_model("LetacE", make_driver("constant", {"a": 0.5, "B": 1.0, "D": 0.0}))
    dp = compute_drift_params(m, xi=math.inf)
    assert dp.alpha == pytest.approx(1.0)
    assert dp.lam_alpha == pytest.approx(0.5)
    assert dp.rho == pytest.approx(0.75)
    assert dp.M == pytest.approx(4.0)


def test_drift_params_lognormal(lognormal_model):
    dp = compute_drift_params(lognormal_model)
    assert 0 < dp.alpha <= 1.0 and dp.lam_alpha < 1
    assert 0.5 < dp.rho < 1


def test_arch_smallset_minorization():
    m = make_model("Linear", make_driver("arch", {"c": 0.5, "a": 1.0}))
    r = make_regen(m, {"scheme": "smallset"})
    assert 0 < r.delta < 1
    assert r.in_c(np.array([r.bounds[0], r.bounds[1]])).all()
    b = simulate_cycles(m, r, 5000, 1)
    assert b.violations == 0


def test_user_scheme_passthrough():
    m = make_model("Linear", make_driver("lognormal", {"mu": -0.5, "sigma": 0.5,
                                                       "B": {"dist": "exponential", "scale": 1.0}}))
    r = make_regen(m, {"scheme": "user", "delta": 0.3, "lo": 0.0, "hi": 1.0,
                       "nu_density": lambda x: ((x >= 0) & (x <= 1)).astype(float),
                       "nu_sampler": lambda rng, n: rng.uniform(0, 1, n)})
    assert r.delta == 0.3
    assert "validation" in r.info
    out = validate_minorization(r)
    assert set(out) == {"worst_ratio", "violations"}
