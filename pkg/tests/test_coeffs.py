import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpmv import coeffs as co

# Oracle values (mpmath / scipy quadrature, see the notes directory):
ASTAR_U_2_PLUS_SIN_AT_4 = -1.3713769787623759    # d/du[(2 + sin u) u] at u = 4
H2_MIN_U = 3.6435971674254                        # argmin of 2 + sin u + u cos u on [-5, 5]
H2_MIN_VALUE = -1.67523306366032
MOLLIFIED_ABS_AT_0 = 0.030096296595550485         # 0.1 * E|v| under the bump on the unit disk


def one(a, b="0", **kw):
    kw.setdefault("gamma", 1.0)
    return co.CoefficientSet.from_strings([[a]], [b], **kw)


def at(u, x=0.0):
    return [np.array([x])], np.array([u])


def test_astar_examples():
    cs = co.CoefficientSet.from_strings([["1", "0"], ["0", "1"]], ["0", "0"], gamma=1.0)
    x = [np.array([0.1]), np.array([0.2])]
    assert np.allclose(cs.astar(x, np.array([3.0]))[..., 0], 3 * np.eye(2))
    assert np.all(one("2+sin(u)").astar(*at(0.0)) == 0)
    assert one("1/(1+u^2)").astar(*at(2.0))[0, 0, 0] == pytest.approx(0.4, abs=1e-15)


def test_astar_u_examples():
    assert one("3.5").astar_u(*at(7.0))[0, 0, 0] == 3.5
    assert one("u", mode="degenerate", gamma=0.0).astar_u(*at(2.0))[0, 0, 0] == 4.0
    val = one("2+sin(u)", gamma=0.1).astar_u(*at(4.0))[0, 0, 0]
    assert val == pytest.approx(ASTAR_U_2_PLUS_SIN_AT_4, abs=1e-12)


SETS = [
    co.CoefficientSet.from_strings([["1 + u^2/(1+u^2)"]], ["tanh(u)"], gamma=1.0),
    co.CoefficientSet.from_strings([["1 + 0.5*sin(x1)/(1+u^2)"]], ["0.5*tanh(u)"], gamma=0.3),
    co.CoefficientSet.from_strings([["2 + cos(x1*u)", "0.3*tanh(u)*sin(x2)"], ["", "2 + u^2/(2+u^2)"]],
                                   ["u*cos(x2)", "0"], gamma=0.5),
]


@pytest.mark.parametrize("cs", SETS)
def test_astar_u_matches_finite_differences(cs):
    rng = np.random.default_rng(3)
    d = cs.dim
    x = [rng.uniform(-2, 2, 100) for _ in range(d)]
    u = rng.uniform(0, 3, 100)
    h = 1e-6
    fd = (cs.astar(x, u + h) - cs.astar(x, u - h)) / (2 * h)
    ad = cs.astar_u(x, u)
    assert np.all(np.abs(ad - fd) <= 1e-6 * (1 + np.abs(ad)))


def test_symmetry_and_structure_validation():
    cs = SETS[2]
    assert cs.a[0][1] is cs.a[1][0]
    with pytest.raises(ValueError):
        co.CoefficientSet.from_strings([["x1"]], ["0"], mode="degenerate")
    with pytest.raises(ValueError):
        co.CoefficientSet.from_strings([["1"]], ["0"], mode="nondegenerate", gamma=0.0)
    with pytest.raises(Exception):
        co.CoefficientSet.from_strings([["x2"]], ["0"], gamma=1.0)


def test_check_identity_passes():
    cs = co.CoefficientSet.from_strings([["1", "0"], ["0", "1"]], ["0", "0"], gamma=1.0)
    rep = co.check_hypotheses(cs, co.SampleBox(-1, 1, 0, 1), samples=1000)
    assert rep.passed
    assert rep.min_eigenvalue == pytest.approx(1.0, abs=1e-15)


def test_check_h2_failure_witness():
    cs = one("2+sin(u)", gamma=0.1)
    rep = co.check_hypotheses(cs, co.SampleBox(-1, 1, -5, 5), samples=4096)
    h2 = rep["H2"]
    assert not h2.passed
    assert h2.value == pytest.approx(H2_MIN_VALUE, abs=1e-3)
    assert abs(h2.witness[-1] - H2_MIN_U) < 0.05


def test_check_drift_bound_failure():
    cs = one("1", "x1*u", b_inf=1.0)
    box = co.SampleBox(-10, 10, 0, 2)
    rep = co.check_hypotheses(cs, box, samples=4096)
    b = rep["b_bound"]
    assert not b.passed
    # sampled max of |x1 u| approaches 10 * u_max = 20 from below
    assert 19.0 < b.value <= 20.0
    assert rep["H3"].passed


def test_check_h3_failure():
    rep = co.check_hypotheses(one("1", "1"), co.SampleBox(-1, 1, 0, 1), samples=1000)
    assert not rep["H3"].passed


def test_report_deterministic_and_serializable():
    box = co.SampleBox(-2, 2, 0, 3)
    r1 = co.check_hypotheses(SETS[1], box, samples=2000, seed=5)
    r2 = co.check_hypotheses(SETS[1], box, samples=2000, seed=5)
    assert r1.to_text() == r2.to_text()
    assert r1.to_rows()[0] == ["hypothesis", "value", "bound", "pass", "witness"]
    with pytest.raises(ValueError):
        co.check_hypotheses(SETS[1], box, samples=999)


def test_estimated_bounds_are_inflated():
    cs = one("1", "0.5*tanh(u)")
    rep = co.check_hypotheses(cs, co.SampleBox(-1, 1, 0, 10), samples=2000)
    assert rep.b_inf == pytest.approx(1.1 * rep["b_bound"].value)


@pytest.mark.parametrize("gamma, b_inf, c_inf, want", [
    (1.0, 1.0, 0.0, 1.0),
    (0.5, 2.0, 1.0, 0.1),
])
def test_lambda0_formula(gamma, b_inf, c_inf, want):
    cs = one("1", "tanh(u)", gamma=gamma, b_inf=b_inf, c_inf=c_inf)
    assert co.lambda0(cs) == pytest.approx(want, rel=1e-15)


def test_lambda0_pure_diffusion_and_missing_bounds():
    assert co.lambda0(one("1 + u^2/(1+u^2)")) == math.inf
    with pytest.raises(co.MissingBounds):
        co.lambda0(one("1", "tanh(u)"))
    est = co.lambda0(one("1", "tanh(u)"), box=co.SampleBox(-1, 1, 0, 2))
    assert 0 < est < math.inf


def test_lambda0_degenerate_uses_viscosity():
    cs = one("min(u, 5)", "0.5*tanh(u)", mode="degenerate", gamma=0.0, b_inf=0.5)
    assert co.lambda0(co.add_viscosity(cs, 0.01)) == pytest.approx(0.04)


def test_viscosity_examples():
    cs = one("0", mode="degenerate", gamma=0.0)
    r = co.add_viscosity(cs, 0.1)
    assert r.a_matrix(*at(0.3))[0, 0, 0] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        co.add_viscosity(cs, 0.0)
    pm = one("min(u, 5)", mode="degenerate", gamma=0.0)
    rep = co.check_hypotheses(co.add_viscosity(pm, 1e-3), co.SampleBox(-1, 1, 0, 8), samples=2000)
    assert rep["H2'"].passed and rep["H2'"].bound == 1e-3


@pytest.mark.parametrize("cs", SETS)
def test_viscosity_shifts_spectrum_exactly(cs):
    box = co.SampleBox(-1, 1, 0, 2)
    x, u = box.points(cs.dim, 500, 0)
    e0 = np.linalg.eigvalsh(np.moveaxis(co.regularized(cs).astar_u(x, u), (0, 1), (-2, -1)))
    e1 = np.linalg.eigvalsh(np.moveaxis(co.add_viscosity(cs, 0.25).astar_u(x, u), (0, 1), (-2, -1)))
    assert np.allclose(e1 - e0, 0.25, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_lambda0_monotone_in_viscosity(e1, e2):
    cs = one("min(u, 5)", "0.5*tanh(u)", mode="degenerate", gamma=0.0, b_inf=0.5)
    lo, hi = sorted((e1, e2))
    assert co.lambda0(co.add_viscosity(cs, lo)) <= co.lambda0(co.add_viscosity(cs, hi))


def test_regularization_identity_when_off():
    cs = SETS[1]
    r = co.RegularizedSet(cs)
    x, u = co.SampleBox(-1, 1, 0, 2).points(1, 100, 1)
    assert np.array_equal(r.a_matrix(x, u), cs.a_matrix(x, u))
    assert np.array_equal(r.astar_u(x, u), cs.astar_u(x, u))


def test_mollifier_examples():
    m = co.mollify(one("3.25"), 0.2, 5)
    assert np.allclose(m.a_matrix(*at(0.7)), 3.25, atol=1e-10)
    odd = co.mollify(one("2 + u"), 0.1, 5)
    assert odd.a_matrix(*at(0.0))[0, 0, 0] == pytest.approx(2.0, abs=1e-14)
    with pytest.raises(ValueError):
        co.mollify(one("1"), 0.1, 2)
    with pytest.raises(ValueError):
        co.mollify(one("u", mode="degenerate", gamma=0.0), 0.1, 5)


def test_mollified_abs_matches_quadrature_oracle():
    cs = one("1 + abs(u)")
    errs = []
    for nodes in (16, 32, 64, 128):
        val = co.mollify(cs, 0.1, nodes).a_matrix(*at(0.0))[0, 0, 0] - 1.0
        errs.append(abs(val - MOLLIFIED_ABS_AT_0))
    assert errs[-1] < 1e-5
    # the kink limits the tensor rule to second order
    assert all(3.0 < a / b < 5.0 for a, b in zip(errs, errs[1:]))


def test_mollifier_converges_linearly_in_eps():
    cs = one("2 + sin(u) + 0.3*x1^2")
    x, u = co.SampleBox(-1, 1, 0, 2).points(1, 50, 2)
    base = cs.astar(x, u)
    diffs = [np.max(np.abs(co.mollify(cs, e, 7).astar(x, u) - base)) for e in (0.2, 0.1, 0.05)]
    C = max(d / e for d, e in zip(diffs, (0.2, 0.1, 0.05)))
    for d, e in zip(diffs, (0.2, 0.1, 0.05)):
        assert d <= C * e
    assert diffs[0] > diffs[1] > diffs[2]
