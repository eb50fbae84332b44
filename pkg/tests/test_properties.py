import json
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sfpe_tail import make_driver, make_model
from sfpe_tail.config import RunConfig
from sfpe_tail.drivers import Draws, cumulant
from sfpe_tail.estimators import sup_closed_form
from sfpe_tail.io import to_json
from sfpe_tail.sfpe_core import closed_form_forward, identity_violation, iterate

LETAC = make_model("LetacE", make_driver("lognormal", {"mu": -0.3, "sigma": 0.6}))
RUIN = make_model("Ruin", make_driver("lognormal", {"mu": -0.3, "sigma": 0.6}))

finite = st.floats(-3, 3, allow_nan=False)


@st.composite
def paths(draw, max_n=40):
    n = draw(st.integers(1, max_n))
    logA = draw(arrays(float, n, elements=st.floats(-2, 1)))
    B = draw(arrays(float, n, elements=finite))
    D = draw(arrays(float, n, elements=finite))
    v = draw(st.floats(-5, 5))
    return v, Draws(logA, B, D)


@settings(max_examples=200, deadline=None)
@given(paths())
def test_closed_form_equals_iteration(p):
    v, d = p
    it = iterate(LETAC, np.array(v), d)[-1]
    assert abs(closed_form_forward(LETAC, v, d) - it) <= 1e-9 * max(1.0, abs(it))


@settings(max_examples=200, deadline=None)
@given(paths(), st.sampled_from([LETAC, RUIN]))
def test_pathwise_identity(p, model):
    v, d = p
    gap, _ = identity_violation(model, np.array(v), Draws(d.logA[None], d.B[None], d.D[None]))
    assert gap <= 1e-9


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.05, 5), st.floats(0, 40))
def test_sup_dominates(C1, C2, xi, z):
    s = sup_closed_form(C1, C2, xi)
    assert s >= math.exp(-xi * z) * (z * C1 + C2) * (1 - 1e-12) - 1e-300
    assert s >= C2


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, -0.01), st.floats(0.05, 1.5), st.floats(0.0, 3.0))
def test_gaussian_moment_function(mu, sigma, a):
    cum = cumulant(make_driver("lognormal", {"mu": mu, "sigma": sigma}))
    assert math.isclose(cum.lam(a), math.exp(a * mu + a * a * sigma * sigma / 2), rel_tol=1e-12)


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), max_size=20))
def test_json_floats_round_trip(xs):
    assert json.loads(to_json({"x": xs}))["x"] == xs


@given(st.integers(0, 2**64 - 1), st.permutations(["n_cycles", "n_walks", "t"]))
def test_config_hash_key_order(seed, order):
    vals = {"n_cycles": 10, "n_walks": 20, "t": 0.25}
    model = {"kind": "Ruin", "driver": {"family": "ruin", "m_R": 0.2, "s_R": 0.4}}
    a = RunConfig.from_dict({"seed": seed, "model": model, "compute": {k: vals[k] for k in order}})
    b = RunConfig.from_dict({"seed": seed, "model": model, "compute": vals})
    assert a.hash == b.hash
